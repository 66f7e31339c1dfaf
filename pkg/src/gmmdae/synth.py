"""Deterministic synthetic data.

Two generators: samples from a known Gaussian mixture (for checking EM), and
small "videos" of one textured square drifting through a crop window, with
optional fast-motion or unseen-texture anomalies (for the full pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import write_labels
from .rng import derive_rng
from .tensorio import ManifestEntry, write_manifest, write_tensor

TRAIN_TEXTURES = ("checker", "gradient", "stripes")
NOVEL_TEXTURE = "spots"
ANOMALY_TYPES = ("fast_motion", "novel_texture")
FAST_FACTOR = 4.0


@dataclass
class MixtureSpec:
    weights: Sequence[float]
    means: Sequence[Sequence[float]]
    covs: Sequence[Sequence[Sequence[float]]]
    n: int
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ValueError("weights, means and covariances disagree on k or d")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.n < 0:
            raise ValueError(f"sample count must be non-negative, got {self.n}")
        for j, c in enumerate(self.covs):
            if not np.allclose(c, c.T):
                raise ValueError(f"covariance {j} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {j} is not positive definite") from None

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


def sample_mixture(spec: MixtureSpec):
    """Return ``(samples (n, d), component index per sample)``."""
    rng = derive_rng(spec.seed, "synth/mixture")
    assign = rng.choice(spec.k, size=spec.n, p=spec.weights)
    noise = rng.standard_normal((spec.n, spec.d))
    chol = np.linalg.cholesky(spec.covs)
    samples = spec.means[assign] + np.einsum("nij,nj->ni", chol[assign], noise)
    return samples, assign


def texture(name: str, size: int) -> np.ndarray:
    """A ``size`` x ``size`` texture with values in [0.2, 0.9]."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    if name == "checker":
        cell = max(size // 4, 1)
        on = ((r // cell + c // cell) % 2) == 0
        return np.where(on, 0.9, 0.3)
    if name == "gradient":
        return 0.2 + 0.7 * c / max(size - 1, 1)
    if name == "stripes":
        period = max(size // 4, 2)
        return np.where((r % period) < period / 2, 0.85, 0.35)
    if name == "spots":
        period = max(size // 4, 2)
        rr, cc = (r % period) - period / 2 + 0.5, (c % period) - period / 2 + 0.5
        return np.where(rr**2 + cc**2 <= (period / 3) ** 2, 0.9, 0.55)
    raise ValueError(f"unknown texture {name!r}")


def make_pattern_patches(n: int, size: int = 8, seed: int = 0, noise: float = 0.02) -> np.ndarray:
    """``n`` noisy patches drawn from the three training textures, shape (n, size, size)."""
    rng = derive_rng(seed, "synth/patterns")
    bank = np.stack([texture(name, size) for name in TRAIN_TEXTURES])
    pick = rng.integers(len(TRAIN_TEXTURES), size=n)
    out = bank[pick] + noise * rng.standard_normal((n, size, size))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class VideoSpec:
    n_frames: int = 300
    patch_size: int = 64
    blob_size: int = 20
    speed_min: float = 0.2
    speed_max: float = 0.5
    anomalies: list = field(default_factory=list)  # (first_frame, last_frame, type), inclusive
    t: int = 10
    seed: int = 0
    noise: float = 0.02
    background: float = 0.1

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        if self.n_frames < 0:
            raise ValueError("frame count must be non-negative")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")
        if not 0 < self.blob_size <= self.patch_size:
            raise ValueError("blob must fit in the patch")
        for first, last, kind in self.anomalies:
            if kind not in ANOMALY_TYPES:
                raise ValueError(f"unknown anomaly type {kind!r}")
            if not 0 <= first <= last < self.n_frames:
                raise ValueError(f"anomaly range {first}-{last} outside 0-{self.n_frames - 1}")

    def frame_labels(self) -> np.ndarray:
        labels = np.zeros(self.n_frames, dtype=np.int64)
        for first, last, _ in self.anomalies:
            labels[first:last + 1] = 1
        return labels

    def anomaly_at(self, frame: int):
        kinds = {kind for first, last, kind in self.anomalies if first <= frame <= last}
        return kinds


def render_sequence(tex: np.ndarray, velocity, t: int, patch_size: int, background: float,
                    noise: float, rng: np.random.Generator, jitter=(0.0, 0.0)) -> np.ndarray:
    """Crop window of ``t`` frames; the square ends centred (plus jitter) in the last frame."""
    size = tex.shape[0]
    frames = np.full((t, patch_size, patch_size), background, dtype=np.float64)
    centre = np.array([(patch_size - size) / 2.0, (patch_size - size) / 2.0]) + jitter
    velocity = np.asarray(velocity, dtype=np.float64)
    for i in range(t):
        top, left = np.rint(centre - velocity * (t - 1 - i)).astype(int)
        r0, r1 = max(top, 0), min(top + size, patch_size)
        c0, c1 = max(left, 0), min(left + size, patch_size)
        if r0 < r1 and c0 < c1:
            frames[i, r0:r1, c0:c1] = tex[r0 - top:r1 - top, c0 - left:c1 - left]
    frames += noise * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_sequences(spec: VideoSpec):
    """Yield ``(frame_index, (t, h, w) patches, label)`` for every frame."""
    rng = derive_rng(spec.seed, "synth/video")
    bank = {name: texture(name, spec.blob_size) for name in TRAIN_TEXTURES + (NOVEL_TEXTURE,)}
    labels = spec.frame_labels()
    for frame in range(spec.n_frames):
        kinds = spec.anomaly_at(frame)
        # draw every random quantity each frame so injections never shift later frames
        tex_pick = TRAIN_TEXTURES[int(rng.integers(len(TRAIN_TEXTURES)))]
        speed = rng.uniform(spec.speed_min, spec.speed_max)
        fast = rng.uniform(FAST_FACTOR, FAST_FACTOR + 1.0) * spec.speed_max
        angle = rng.uniform(0.0, 2.0 * np.pi)
        jitter = rng.uniform(-2.0, 2.0, size=2)
        seq_rng = np.random.Generator(np.random.PCG64(rng.integers(2**63)))
        tex = bank[NOVEL_TEXTURE] if "novel_texture" in kinds else bank[tex_pick]
        s = fast if "fast_motion" in kinds else speed
        velocity = s * np.array([np.sin(angle), np.cos(angle)])
        patches = render_sequence(tex, velocity, spec.t, spec.patch_size, spec.background,
                                  spec.noise, seq_rng, jitter)
        yield frame, patches, int(labels[frame])


def make_video_corpus(spec: VideoSpec, out_dir) -> tuple:
    """Write GDT1 sequences, ``manifest.txt`` and ``labels.txt`` under ``out_dir``.

    Returns ``(manifest path, labels path)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(exist_ok=True)
    seq_dir = out_dir / "sequences"
    seq_dir.mkdir(exist_ok=True)
    entries = []
    labels = {}
    for frame, patches, label in generate_sequences(spec):
        name = f"seq_{frame:06d}"
        path = seq_dir / f"{name}.gdt"
        write_tensor(patches, path)
        entries.append(ManifestEntry(name, Path("sequences") / path.name, frame, label))
        labels[frame] = label
    manifest = out_dir / "manifest.txt"
    write_manifest(entries, manifest)
    label_path = out_dir / "labels.txt"
    write_labels(labels, label_path)
    return manifest, label_path
