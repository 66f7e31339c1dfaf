"""Patch anomaly values from reconstruction quality and latent likelihood.

Each patch is scored by both pipelines: appearance (the patch itself) and
motion (its dynamic image). The four numbers are fused linearly and negated,
so poor reconstructions and unlikely codes give high anomaly values. A frame
takes the largest value among its patches; frame values are then min-max
normalized over the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autoenc, density
from .rankpool import RankPoolConfig, dynamic_image_array
from .tensorio import PatchSequence

MSE_FLOOR = 1e-12
SCORE_HEADER = "frame_index,p_oi,psnr_oi,p_di,psnr_di,anomaly,normalized"


class IncompatibleModelsError(ValueError):
    pass


@dataclass(frozen=True)
class FusionWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"fusion weights must be finite and non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one fusion weight must be positive")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass(frozen=True)
class ScoreRecord:
    frame_index: int
    sequence_id: str
    p_oi: float
    psnr_oi: float
    p_di: float
    psnr_di: float
    anomaly: float

    def components(self) -> tuple:
        return (self.p_oi, self.psnr_oi, self.p_di, self.psnr_di)


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    raw: float
    normalized: float
    # components of the patch that set the frame value; None for empty frames
    record: Optional[ScoreRecord] = None


def psnr(x, x_hat) -> float:
    """10 log10(max(x) / MSE) with the peak taken as max(x) itself (not squared)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    peak = float(x.max())
    if peak <= 0:
        raise ValueError(f"max(x) must be positive, got {peak}")
    mse = max(float(np.mean((x - x_hat) ** 2)), MSE_FLOOR)
    return 10.0 * math.log10(peak / mse)


def fuse(p_oi: float, psnr_oi: float, p_di: float, psnr_di: float, w: FusionWeights) -> float:
    comps = (p_oi, psnr_oi, p_di, psnr_di)
    if not all(math.isfinite(c) for c in comps):
        raise ValueError(f"non-finite score component in {comps}")
    return -sum(lam * c for lam, c in zip(w.as_tuple(), comps))


def fuse_array(components: np.ndarray, w: FusionWeights) -> np.ndarray:
    """Vectorised fuse over an (n, 4) component matrix."""
    return -(np.asarray(components, dtype=np.float64) @ np.asarray(w.as_tuple()))


def frame_score(patch_scores: Sequence[ScoreRecord]) -> float:
    if not patch_scores:
        raise ValueError("frame has no patch scores")
    frames = {r.frame_index for r in patch_scores}
    if len(frames) != 1:
        raise ValueError(f"patch scores span several frames: {sorted(frames)}")
    return max(r.anomaly for r in patch_scores)


def normalize_scores(frames: Sequence[float]) -> list:
    a = np.asarray(frames, dtype=np.float64)
    if a.size == 0:
        raise ValueError("cannot normalize an empty score list")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return [0.0] * a.size
    return [float(v) for v in np.clip((a - lo) / (hi - lo), 0.0, 1.0)]


def aggregate_frames(records: Iterable[ScoreRecord],
                     frame_indices: Optional[Iterable[int]] = None) -> list:
    """Max per frame, then scene-level normalization.

    Frames listed in ``frame_indices`` without any record get the scene
    minimum, i.e. a normalized score of 0.
    """
    by_frame = {}
    for rec in records:
        by_frame.setdefault(rec.frame_index, []).append(rec)
    if not by_frame:
        raise ValueError("no patch scores to aggregate")
    best = {f: max(rs, key=lambda r: r.anomaly) for f, rs in by_frame.items()}
    raw = {f: frame_score(rs) for f, rs in by_frame.items()}
    scene_min = min(raw.values())
    all_frames = sorted(set(raw) | set(frame_indices or ()))
    raw_list = [raw.get(f, scene_min) for f in all_frames]
    norm = normalize_scores(raw_list)
    return [FrameScore(f, a, s, best.get(f)) for f, a, s in zip(all_frames, raw_list, norm)]


def check_compatible(dae: autoenc.DaeModel, gmm: density.GmmModel, name: str) -> None:
    if dae.latent_dim != gmm.d:
        raise IncompatibleModelsError(
            f"{name}: autoencoder bottleneck has {dae.latent_dim} dims but the GMM has d={gmm.d}"
        )


def score_sequences(patch_model: autoenc.DaeModel, motion_model: autoenc.DaeModel,
                    patch_gmm: density.GmmModel, motion_gmm: density.GmmModel,
                    corpus: Sequence[PatchSequence], cfg: RankPoolConfig,
                    w: FusionWeights) -> list:
    """One ScoreRecord per sequence, in corpus order."""
    check_compatible(patch_model, patch_gmm, "appearance pipeline")
    check_compatible(motion_model, motion_gmm, "motion pipeline")
    if not corpus:
        return []
    for seq in corpus:
        if seq.t != cfg.t:
            raise ValueError(f"sequence {seq.sequence_id!r}: {seq.t} patches, time stride is {cfg.t}")
    # dynamic images are emitted as float32, as they would be on disk
    dyn = np.stack([dynamic_image_array(s.patches).astype(np.float32) for s in corpus])
    cur = np.stack([s.current for s in corpus])

    def pipeline(model, gmm, raw):
        x = model.prepare(raw)
        z, x_hat = autoenc.forward(model, x)
        ll = density.sample_log_likelihoods(gmm, z)
        return ll, x, x_hat

    p_o, x_o, xh_o = pipeline(patch_model, patch_gmm, cur)
    p_d, x_d, xh_d = pipeline(motion_model, motion_gmm, dyn)
    records = []
    for i, seq in enumerate(corpus):
        try:
            comps = (float(p_o[i]), psnr(x_o[i], xh_o[i]), float(p_d[i]), psnr(x_d[i], xh_d[i]))
            anomaly = fuse(*comps, w)
        except ValueError as exc:
            raise ValueError(f"sequence {seq.sequence_id!r}: {exc}") from None
        records.append(ScoreRecord(seq.frame_index, seq.sequence_id, *comps, anomaly))
    return records


def score_corpus(patch_model, motion_model, patch_gmm, motion_gmm, corpus, cfg: RankPoolConfig,
                 w: FusionWeights, frame_indices=None) -> list:
    records = score_sequences(patch_model, motion_model, patch_gmm, motion_gmm, corpus, cfg, w)
    return aggregate_frames(records, frame_indices)


def write_scores(frames: Sequence[FrameScore], path) -> None:
    lines = [SCORE_HEADER]
    for f in frames:
        if f.record is None:
            comps = ["", "", "", ""]
        else:
            comps = [repr(c) for c in f.record.components()]
        lines.append(",".join([str(f.frame_index), *comps, repr(f.raw), repr(f.normalized)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> list:
    """Rows of ``(frame_index, components or None, anomaly, normalized)``."""
    path = Path(path)
    rows = []
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != SCORE_HEADER:
        raise ValueError(f"{path}: missing score header")
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        try:
            comps = None if fields[1] == "" else tuple(float(v) for v in fields[1:5])
            rows.append((int(fields[0]), comps, float(fields[5]), float(fields[6])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed number") from None
    return rows
