"""Dynamic images by approximate rank pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import PatchSequence


@dataclass(frozen=True)
class RankPoolConfig:
    t: int = 10

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"time stride must be >= 1, got {self.t}")


@dataclass(frozen=True)
class DynamicImage:
    image: np.ndarray
    frame_index: int


def rank_pool_coefficients(t: int) -> np.ndarray:
    """Weight of patch ``i`` (1-based): sum over j=i..t of (2j - t - 1) / j."""
    if t < 1:
        raise ValueError(f"time stride must be >= 1, got {t}")
    j = np.arange(1, t + 1, dtype=np.float64)
    terms = (2.0 * j - t - 1.0) / j
    # suffix sums, accumulated from the tail
    return np.cumsum(terms[::-1])[::-1].copy()


def dynamic_image_array(patches: np.ndarray) -> np.ndarray:
    """Weighted temporal sum of a (t, h, w) stack, float64 accumulation."""
    alpha = rank_pool_coefficients(patches.shape[0])
    return np.tensordot(alpha, patches.astype(np.float64), axes=(0, 0))


def dynamic_image(seq: PatchSequence, cfg: RankPoolConfig) -> DynamicImage:
    if seq.t != cfg.t:
        raise ValueError(
            f"sequence {seq.sequence_id!r} has {seq.t} patches but the time stride is {cfg.t}"
        )
    return DynamicImage(dynamic_image_array(seq.patches).astype(np.float32), seq.frame_index)
