"""Training objectives. Each accepts torch tensors (differentiable) or plain numbers/arrays."""

from __future__ import annotations

import torch

PROB_CLAMP = 1e-7


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def embed_loss(center, predicted) -> torch.Tensor:
    """Mean squared error over the T x F center block (averaged over a leading batch axis too)."""
    center, predicted = _t(center), _t(predicted)
    if center.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {tuple(center.shape)} vs {tuple(predicted.shape)}")
    return torch.mean((center - predicted) ** 2)


def bce_loss(prob, target) -> torch.Tensor:
    p = torch.clamp(_t(prob), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = _t(target).to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def huber_loss(pred, target) -> torch.Tensor:
    d = torch.abs(_t(target) - _t(pred))
    return torch.where(d < 1.0, 0.5 * d ** 2, d - 0.5)


def multitask_loss(logit, y_c, pred_score, y_r) -> torch.Tensor:
    """BCE on the sigmoid of the classification logit plus Huber on the score, unweighted."""
    return bce_loss(torch.sigmoid(_t(logit)), y_c) + huber_loss(pred_score, y_r)
