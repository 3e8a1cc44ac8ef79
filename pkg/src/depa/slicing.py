"""Cut a clip spectrogram into context/center training pairs.

A clip is laid out as ``[X_0, gap, X_1, gap, ...]`` from row 0. Each sample
``X_i`` holds ``2k + 1`` blocks of ``T`` frames; the middle block is the
prediction target and the ``2k`` blocks around it form the context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class SliceConfig:
    k: int = 3
    T: int = 96
    alpha: float = 0.1
    F: int = 128

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.F < 1:
            raise ValueError(f"F must be >= 1, got {self.F}")

    @property
    def sample_frames(self) -> int:
        return (2 * self.k + 1) * self.T

    @property
    def context_frames(self) -> int:
        return 2 * self.k * self.T

    @property
    def stride(self) -> int:
        return self.sample_frames + gap_frames(self)


@dataclass
class TrainingSample:
    context: np.ndarray  # (2kT, F)
    center: np.ndarray  # (T, F)
    clip_id: str
    sample_index: int


def gap_frames(cfg: SliceConfig) -> int:
    # tiny epsilon keeps exact products such as 0.5 * 12 = 6 from flooring to 5
    return int(math.floor(cfg.alpha * cfg.sample_frames + 1e-9))


def num_samples(S: int, cfg: SliceConfig) -> int:
    if S <= 0:
        raise ValueError("empty clip")
    n = int(math.floor(S / ((1.0 + cfg.alpha) * cfg.sample_frames) + 1e-12))
    return max(n, 1)


def sample_spans(S: int, cfg: SliceConfig) -> List[Tuple[int, int]]:
    """Row ranges ``[start, end)`` of each sample; ``end`` may exceed ``S`` (zero padding)."""
    return [(i * cfg.stride, i * cfg.stride + cfg.sample_frames) for i in range(num_samples(S, cfg))]


def split_sample(x: np.ndarray, cfg: SliceConfig) -> Tuple[np.ndarray, np.ndarray]:
    if x.shape[0] != cfg.sample_frames:
        raise ValueError(f"sample has {x.shape[0]} rows, expected {cfg.sample_frames}")
    lo, hi = cfg.k * cfg.T, (cfg.k + 1) * cfg.T
    context = np.concatenate([x[:lo], x[hi:]], axis=0)
    return context, x[lo:hi].copy()


def join_sample(context: np.ndarray, center: np.ndarray, cfg: SliceConfig) -> np.ndarray:
    """Inverse of :func:`split_sample`."""
    lo = cfg.k * cfg.T
    return np.concatenate([context[:lo], center, context[lo:]], axis=0)


def slice_clip(X: np.ndarray, cfg: SliceConfig, clip_id: str = "") -> List[TrainingSample]:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"expected an S x F matrix, got shape {X.shape}")
    S, F = X.shape
    if F != cfg.F:
        raise ValueError(f"feature dimension mismatch: clip has F={F}, config expects {cfg.F}")
    out = []
    for i, (start, end) in enumerate(sample_spans(S, cfg)):
        block = np.zeros((cfg.sample_frames, F), dtype=X.dtype)
        avail = max(0, min(end, S) - start)
        block[:avail] = X[start:start + avail]
        context, center = split_sample(block, cfg)
        out.append(TrainingSample(context, center, clip_id, i))
    return out
