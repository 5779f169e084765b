"""Pixel-wise losses between predicted and reference forest density.

Each loss returns ``(value, grad)`` where ``grad`` is d(loss)/d(pred) with
the shape and dtype of ``pred``.  Sums are accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError

LOG_EPS = 1e-7
JACCARD_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    use_l1: bool = False
    epsilon_log: float = LOG_EPS

    @property
    def terms(self) -> tuple[str, ...]:
        return ("bce", "jaccard", "l1") if self.use_l1 else ("bce", "jaccard")


def _check(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")


def bce_loss(pred, ref, eps: float = LOG_EPS) -> tuple[float, np.ndarray]:
    pred, ref = np.asarray(pred), np.asarray(ref)
    _check(pred, ref)
    p = np.clip(pred.astype(np.float64), eps, 1 - eps)
    y = ref.astype(np.float64)
    n = p.size
    value = -np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)) / n
    grad = (p - y) / (p * (1 - p)) / n
    # the clamp is flat outside [eps, 1-eps]
    grad[(pred < eps) | (pred > 1 - eps)] = 0.0
    return float(value), grad.astype(pred.dtype)


def jaccard_loss(pred, ref, eps: float = JACCARD_EPS) -> tuple[float, np.ndarray]:
    """Soft Jaccard distance, one ratio over the whole batch."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    _check(pred, ref)
    p = pred.astype(np.float64)
    y = ref.astype(np.float64)
    inter = np.sum(y * p)
    union = np.sum(y + p - y * p) + eps
    value = 1.0 - inter / union
    # d/dp of -I/U with dI/dp = y, dU/dp = 1 - y
    grad = -(y * union - inter * (1 - y)) / union**2
    return float(value), grad.astype(pred.dtype)


def l1_loss(pred, ref) -> tuple[float, np.ndarray]:
    pred, ref = np.asarray(pred), np.asarray(ref)
    _check(pred, ref)
    d = pred.astype(np.float64) - ref.astype(np.float64)
    n = d.size
    return float(np.sum(np.abs(d)) / n), (np.sign(d) / n).astype(pred.dtype)


def loss_terms(pred, ref, config: LossConfig = LossConfig()) -> dict[str, tuple[float, np.ndarray]]:
    out = {
        "bce": bce_loss(pred, ref, config.epsilon_log),
        "jaccard": jaccard_loss(pred, ref),
    }
    if config.use_l1:
        out["l1"] = l1_loss(pred, ref)
    return out


def composite_loss(pred, ref, config: LossConfig = LossConfig()) -> tuple[float, np.ndarray, dict[str, float]]:
    """Unit-weight sum of the enabled terms.

    Returns ``(total, grad, breakdown)``; the breakdown maps term name to value.
    """
    terms = loss_terms(pred, ref, config)
    total = 0.0
    grad = None
    for value, g in terms.values():
        total += value
        grad = g.astype(np.float64) if grad is None else grad + g
    breakdown = {k: v for k, (v, _) in terms.items()}
    return total, grad.astype(np.asarray(pred).dtype), breakdown
