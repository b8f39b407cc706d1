"""Training objectives: weighted BCE, focal, Dice and their mixture.

Two parallel implementations live here. The NumPy functions (float64) are
the reference forms together with their closed-form gradients; the
``torch_*`` functions are what the trainer differentiates, and return one
unweighted loss per sample so the batch can be reduced as
``sum(w_i * loss_i) / sum(w_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InvalidWeightError, ShapeError

DELTA = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0 / 3.0
    gamma: float = 2.0
    beta: float = 50.0
    eps: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta <= 0 or self.eps <= 0:
            raise ConfigurationError("beta and eps must be positive")


def _check_weight(w: float) -> None:
    if not w > 0:
        raise InvalidWeightError(f"weight must be positive, got {w}")


def _pair(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"label shape {y.shape} != prediction shape {p.shape}")
    return y, p


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, DELTA, 1.0 - DELTA)


def _in_range(p: np.ndarray) -> np.ndarray:
    # gradient mask: clamping cuts the gradient outside [delta, 1 - delta]
    return ((p >= DELTA) & (p <= 1.0 - DELTA)).astype(np.float64)


# ---------------------------------------------------------------------------
# NumPy reference
# ---------------------------------------------------------------------------

def bce_loss(y, p, weight: float = 1.0) -> float:
    """``-w * (y ln p + (1 - y) ln(1 - p))``, averaged if given arrays."""
    _check_weight(weight)
    y, p = _pair(y, p)
    q = _clamp(p)
    return float(np.mean(-weight * (y * np.log(q) + (1 - y) * np.log1p(-q))))


def focal_loss(y, p, weight: float = 1.0, cfg: LossConfig = LossConfig()) -> float:
    _check_weight(weight)
    y, p = _pair(y, p)
    q = _clamp(p)
    g, b = cfg.gamma, cfg.beta
    terms = b * (1 - q) ** g * y * np.log(q) + q ** g * (1 - y) * np.log1p(-q)
    return float(-weight * np.mean(terms))


def dice_loss(y, p, weight: float = 1.0, eps: float = 1.0) -> float:
    _check_weight(weight)
    y, p = _pair(y, p)
    inter = np.sum(y * p)
    return float(weight * (1.0 - (2.0 * inter + eps) / (np.sum(y) + np.sum(p) + eps)))


def seg_loss(y, p, weight: float = 1.0, cfg: LossConfig = LossConfig()) -> float:
    return cfg.alpha * dice_loss(y, p, weight, cfg.eps) + (1 - cfg.alpha) * focal_loss(y, p, weight, cfg)


def bce_grad(y, p, weight: float = 1.0) -> np.ndarray:
    """Gradient of :func:`bce_loss` (mean reduction) w.r.t. ``p``."""
    y, p = _pair(y, p)
    q = _clamp(p)
    g = -weight * (y / q - (1 - y) / (1 - q)) / y.size
    return g * _in_range(p)


def focal_grad(y, p, weight: float = 1.0, cfg: LossConfig = LossConfig()) -> np.ndarray:
    y, p = _pair(y, p)
    q = _clamp(p)
    g, b = cfg.gamma, cfg.beta
    d_pos = b * y * (-g * (1 - q) ** (g - 1) * np.log(q) + (1 - q) ** g / q) if g else b * y / q
    d_neg = (1 - y) * (g * q ** (g - 1) * np.log1p(-q) - q ** g / (1 - q)) if g else -(1 - y) / (1 - q)
    return -weight * (d_pos + d_neg) / y.size * _in_range(p)


def dice_grad(y, p, weight: float = 1.0, eps: float = 1.0) -> np.ndarray:
    y, p = _pair(y, p)
    num = 2.0 * np.sum(y * p) + eps
    den = np.sum(y) + np.sum(p) + eps
    return -weight * (2.0 * y * den - num) / den ** 2


def seg_grad(y, p, weight: float = 1.0, cfg: LossConfig = LossConfig()) -> np.ndarray:
    return cfg.alpha * dice_grad(y, p, weight, cfg.eps) + (1 - cfg.alpha) * focal_grad(y, p, weight, cfg)


# ---------------------------------------------------------------------------
# torch, per-sample (first axis is the batch)
# ---------------------------------------------------------------------------

def _flat(y: torch.Tensor, p: torch.Tensor):
    if y.shape != p.shape:
        raise ShapeError(f"label shape {tuple(y.shape)} != prediction shape {tuple(p.shape)}")
    return y.reshape(y.shape[0], -1), p.reshape(p.shape[0], -1)


def torch_bce(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    y, p = _flat(y, p)
    q = p.clamp(DELTA, 1 - DELTA)
    return -(y * torch.log(q) + (1 - y) * torch.log1p(-q)).mean(dim=1)


def torch_focal(y: torch.Tensor, p: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    y, p = _flat(y, p)
    q = p.clamp(DELTA, 1 - DELTA)
    terms = cfg.beta * (1 - q) ** cfg.gamma * y * torch.log(q) + q ** cfg.gamma * (1 - y) * torch.log1p(-q)
    return -terms.mean(dim=1)


def torch_dice(y: torch.Tensor, p: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    y, p = _flat(y, p)
    return 1.0 - (2.0 * (y * p).sum(dim=1) + eps) / (y.sum(dim=1) + p.sum(dim=1) + eps)


def torch_seg(y: torch.Tensor, p: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return cfg.alpha * torch_dice(y, p, cfg.eps) + (1 - cfg.alpha) * torch_focal(y, p, cfg)


def weighted_batch_loss(per_sample: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    if torch.any(weights <= 0):
        raise InvalidWeightError("sample weights must be positive")
    weights = weights.to(per_sample.dtype)
    return (weights * per_sample).sum() / weights.sum()
