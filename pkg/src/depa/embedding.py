"""Response-level features: encoder embeddings and higher-order statistics pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .pretrain import EncoderDecoder, _as_model, encoder_forward

STAT_NAMES = ("mean", "median", "variance", "min", "max", "skewness", "kurtosis")
DEGENERATE_VARIANCE = 1e-12


@dataclass
class ResponseSegment:
    clip_id: str
    response_index: int
    spectrogram: np.ndarray  # (S_r, F)
    start_seconds: float = 0.0
    end_seconds: float = 0.0


def pad_to_min_length(x: np.ndarray, min_frames: int) -> np.ndarray:
    """Symmetric zero padding along time up to ``min_frames`` rows."""
    short = min_frames - x.shape[0]
    if short <= 0:
        return x
    before = short // 2
    return np.pad(x, ((before, short - before), (0, 0)))


def extract_depa(model, seg: ResponseSegment) -> np.ndarray:
    model: EncoderDecoder = _as_model(model)
    enc = model.encoder
    x = np.asarray(seg.spectrogram)
    if x.ndim != 2 or x.shape[1] != enc.n_features:
        raise ValueError("feature dimension mismatch")
    if x.shape[0] < 1:
        raise ValueError(f"response {seg.response_index} of {seg.clip_id} has no frames")
    return encoder_forward(model, pad_to_min_length(x, enc.cfg.min_frames)).astype(np.float32)


def extract_depa_sequence(model, segs: Sequence[ResponseSegment]) -> List[np.ndarray]:
    if len(segs) == 0:
        raise ValueError("no responses to embed")
    model = _as_model(model)
    return [extract_depa(model, s) for s in segs]


def _column_stats(col: np.ndarray) -> List[float]:
    col = col[np.isfinite(col)]
    if col.size == 0:
        return [0.0] * 7
    n = col.size
    mean = col.mean()
    median = np.sort(col)[(n - 1) // 2]
    dev = col - mean
    var = np.mean(dev ** 2)
    if var < DEGENERATE_VARIANCE:
        skew = kurt = 0.0
    else:
        skew = np.mean(dev ** 3) / var ** 1.5
        kurt = np.mean(dev ** 4) / var ** 2 - 3.0
    return [mean, median, var, col.min(), col.max(), skew, kurt]


def higher_order_stats(m: np.ndarray) -> np.ndarray:
    """Pool an N x D frame-feature matrix into 7*D values, grouped statistic by statistic.

    Non-finite cells are ignored per column. A column with no finite cells pools to zeros.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("frame feature matrix needs at least one row")
    per_col = np.array([_column_stats(m[:, j]) for j in range(m.shape[1])])  # (D, 7)
    return per_col.T.reshape(-1)
