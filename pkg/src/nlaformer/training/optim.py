"""Adam and piecewise-constant learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "adam_step", "lr_at"]

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and advances ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = BETA1 * state.m.get(name, np.zeros_like(p)) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(name, np.zeros_like(p)) + (1.0 - BETA2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return out, state


def lr_at(schedule, step: int) -> float:
    """``schedule`` is a list of ``[lr, steps]``; the last entry's lr persists."""
    if not schedule:
        raise ValueError("empty learning-rate schedule")
    edge = 0
    for lr, span in schedule:
        edge += span
        if step < edge:
            return float(lr)
    return float(schedule[-1][0])
