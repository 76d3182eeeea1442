"""Supervision losses with closed-form gradients, and evaluation metrics.

Predictions are probe arrays: ``x_hat`` of shape ``(B, T+1, n)`` and
``in_hat`` of shape ``(B, T+1, 2n)`` holding ``(r, d)``.  Every loss is the
batch mean of a per-problem sum over ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "loss_result",
    "loss_joint",
    "loss_step_solution",
    "window_start",
    "MetricSet",
    "compute_metrics",
    "discrepancy",
]


def _check(pred, ref, what):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 3:
        raise ValueError(f"{what}: prediction {pred.shape} and teacher {ref.shape} must match as (B, T+1, n)")
    return pred, ref


def _sq(diff):
    return np.sum(diff * diff, axis=-1)  # (B, T+1)


def _reduce(terms, denom):
    return float(np.mean(np.sum(terms, axis=1) / denom))


def loss_result(x_hat, x_ref, grad: bool = False):
    """``mean_b (1/(n(T+1))) sum_t ||x_hat_t - x_t||^2``."""
    x_hat, x_ref = _check(x_hat, x_ref, "loss_result")
    bsz, steps, n = x_hat.shape
    diff = x_hat - x_ref
    value = _reduce(_sq(diff), n * steps)
    if not grad:
        return value
    return value, 2.0 * diff / (bsz * n * steps)


def loss_joint(x_hat, in_hat, x_ref, in_ref, eta: float, grad: bool = False):
    """``loss_result`` plus ``eta ||in_hat_t - (r_t, d_t)||^2`` inside the sum."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    x_hat, x_ref = _check(x_hat, x_ref, "loss_joint")
    in_hat, in_ref = _check(in_hat, in_ref, "loss_joint")
    if in_hat.shape[:2] != x_hat.shape[:2]:
        raise ValueError("x and intermediate probes disagree on (B, T+1)")
    bsz, steps, n = x_hat.shape
    dx = x_hat - x_ref
    din = in_hat - in_ref
    value = _reduce(_sq(dx) + eta * _sq(din), n * steps)
    if not grad:
        return value
    scale = 2.0 / (bsz * n * steps)
    return value, scale * dx, (scale * eta) * din


def window_start(T: int, K: int) -> int:
    if not 1 <= K <= T + 1:
        raise ValueError(f"window length K={K} must lie in [1, T+1={T + 1}]")
    return max(T - K + 1, 0)


def loss_step_solution(x_hat, x_ref, x_true, lam: float, K: int, grad: bool = False):
    """Window ``t = T0..T``: ``||x_hat_t - x_t||^2 + lam ||x_hat_t - x_true||^2``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    x_hat, x_ref = _check(x_hat, x_ref, "loss_step_solution")
    x_true = np.asarray(x_true, dtype=np.float64)
    bsz, steps, n = x_hat.shape
    if x_true.shape != (bsz, n):
        raise ValueError(f"x_true must have shape {(bsz, n)}, got {x_true.shape}")
    t0 = window_start(steps - 1, K)
    win = steps - t0
    dx = x_hat[:, t0:] - x_ref[:, t0:]
    ds = x_hat[:, t0:] - x_true[:, None, :]
    value = _reduce(_sq(dx) + lam * _sq(ds), win * n)
    if not grad:
        return value
    g = np.zeros_like(x_hat)
    g[:, t0:] = (2.0 / (bsz * win * n)) * (dx + lam * ds)
    return value, g


@dataclass(frozen=True)
class MetricSet:
    rel_err: np.ndarray  # (T+1,)
    int_err: np.ndarray  # (T+1,)
    discrepancy: float

    def row(self) -> list[float]:
        return [*self.rel_err.tolist(), *self.int_err.tolist(), self.discrepancy]


def discrepancy(in_hat, in_ref) -> float:
    """``mean_b (1/n) sum_{t=2}^{n} (1/(n-1)) ||in_hat_t - (r_t, d_t)||^2``; ``t`` capped at ``T``."""
    in_hat, in_ref = _check(in_hat, in_ref, "discrepancy")
    steps = in_hat.shape[1]
    n = in_hat.shape[2] // 2
    last = min(n, steps - 1)
    if n < 2 or last < 2:
        return 0.0
    sq = _sq(in_hat[:, 2:last + 1] - in_ref[:, 2:last + 1])
    return float(np.mean(np.sum(sq / (n - 1), axis=1) / n))


def compute_metrics(x_hat, in_hat, x_true, in_ref) -> MetricSet:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    n = x_hat.shape[-1]
    rel = _sq(x_hat - x_true[:, None, :]) / np.sum(x_true * x_true, axis=-1, keepdims=True)
    inter = _sq(np.asarray(in_hat) - np.asarray(in_ref)) / n
    return MetricSet(rel.mean(axis=0), inter.mean(axis=0), discrepancy(in_hat, in_ref))
