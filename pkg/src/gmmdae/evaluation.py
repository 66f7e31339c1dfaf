"""Frame-level ROC analysis and fusion-weight grid search."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .scoring import FusionWeights, fuse_array

DEFAULT_GRID_VALUES = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class GridSpec:
    lambda1: tuple = DEFAULT_GRID_VALUES
    lambda2: tuple = DEFAULT_GRID_VALUES
    lambda3: tuple = DEFAULT_GRID_VALUES
    lambda4: tuple = DEFAULT_GRID_VALUES

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            vals = getattr(self, name)
            if len(vals) == 0:
                raise ValueError(f"{name}: empty candidate list")
            if any(v < 0 for v in vals):
                raise ValueError(f"{name}: candidates must be non-negative")

    def points(self):
        """Grid points in lexicographic order, skipping the all-zero point."""
        for p in itertools.product(self.lambda1, self.lambda2, self.lambda3, self.lambda4):
            if any(v > 0 for v in p):
                yield p


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("AUROC needs at least one normal and one abnormal label")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    s, pos = _check(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> list:
    """(fpr, tpr) points at every distinct threshold, from (0, 0) to (1, 1)."""
    s, pos = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = tp[ends] / tp[-1]
    fpr = fp[ends] / fp[-1]
    return [(0.0, 0.0)] + [(float(f), float(t)) for f, t in zip(fpr, tpr)]


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def _frame_max(values, frame_ids):
    uniq, inv = np.unique(frame_ids, return_inverse=True)
    out = np.full(uniq.size, -np.inf)
    np.maximum.at(out, inv, values)
    return out


def grid_search(components, labels, grid: GridSpec = GridSpec(), frame_ids: Optional[Sequence[int]] = None):
    """Pick the fusion weights with the best frame-level AUROC.

    ``components`` is an (n, 4) matrix of (P_oi, PSNR_oi, P_di, PSNR_di). Without
    ``frame_ids`` every row is its own frame and ``labels`` is aligned with the
    rows; with ``frame_ids`` rows are max-pooled per frame and ``labels`` follow
    the sorted unique frame ids. Ties keep the earliest grid point.
    """
    comps = np.asarray(components, dtype=np.float64)
    if comps.ndim != 2 or comps.shape[1] != 4:
        raise ValueError(f"components must be an (n, 4) matrix, got shape {comps.shape}")
    labels = np.asarray(labels)
    best_w, best_auc = None, -np.inf
    for point in grid.points():
        w = FusionWeights(*point)
        a = fuse_array(comps, w)
        if frame_ids is not None:
            a = _frame_max(a, np.asarray(frame_ids))
        # min-max normalisation is monotone, so it cannot change the AUROC
        value = auroc(a, labels)
        if value > best_auc:
            best_w, best_auc = w, value
    if best_w is None:
        raise ValueError("grid has no point with a positive weight")
    return best_w, best_auc


def read_labels(path) -> dict:
    path = Path(path)
    labels = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 2 or fields[1] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'frame_index,label' with label 0 or 1")
        try:
            frame = int(fields[0])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad frame index {fields[0]!r}") from None
        if frame in labels:
            raise ValueError(f"{path}:{lineno}: duplicate frame {frame}")
        labels[frame] = int(fields[1])
    return labels


def write_labels(labels: dict, path) -> None:
    lines = ["# frame_index,label"] + [f"{f},{labels[f]}" for f in sorted(labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(metrics: Sequence[tuple], path) -> None:
    lines = ["metric,value"] + [f"{k},{v}" for k, v in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
