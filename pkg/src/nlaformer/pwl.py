"""Piecewise-linear ReLU realisations of scalar multiplication and division.

A continuous piecewise-linear interpolant through knots ``t_0 < ... < t_M`` is
written as ``g(t) = g(t_0) + sum_i k_i ReLU(t - t_i)``, valid for ``t >= t_0``.
Products use the quarter-square identity ``xy = ((x+y)^2 - (x-y)^2) / 4``;
with uniform knot spacing ``h`` the interpolation error of ``t^2`` lies in
``[0, h^2/4]``, so the product error is at most ``h^2/16``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ReluNetwork, RowLayout

__all__ = [
    "PwlFfnParams",
    "DomainError",
    "relu_interpolant",
    "square_knots",
    "reciprocal_knots",
    "mul_network",
    "div_network",
    "mul_error_bound",
]


class DomainError(ValueError):
    """Input outside the domain a piecewise-linear network was built for."""


@dataclass(frozen=True)
class PwlFfnParams:
    bound: float = 4.0  # B: |operands| <= B
    knots: int = 256  # K: intervals per interpolant
    div_guard: float = 1e-2  # delta: |denominator| >= delta

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if self.knots < 2:
            raise ValueError("knot count must be at least 2")
        if not 0 < self.div_guard < self.bound:
            raise ValueError("div_guard must lie in (0, bound)")


def relu_interpolant(knots: np.ndarray, values: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``(g0, k)`` with ``g(t) = g0 + sum_i k[i] ReLU(t - knots[i])``.

    ``k`` has one entry per interval; the final knot needs no unit.
    """
    knots = np.asarray(knots, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    slopes = np.diff(values) / np.diff(knots)
    coef = np.diff(slopes, prepend=0.0)
    return float(values[0]), coef


def square_knots(radius: float, intervals: int) -> np.ndarray:
    return np.linspace(-radius, radius, intervals + 1)


def reciprocal_knots(bound: float, guard: float, intervals: int) -> np.ndarray:
    # geometric spacing: 1/t has curvature 2/t^3, uniform knots waste resolution near B
    pos = np.geomspace(guard, bound, intervals + 1)
    return np.concatenate([-pos[::-1], pos])


def mul_error_bound(bound: float, intervals: int) -> float:
    h = 4.0 * bound / intervals
    return h * h / 16.0


def _square_units(radius: float, intervals: int):
    t = square_knots(radius, intervals)
    _, coef = relu_interpolant(t, t * t)
    return t[:-1], coef


def mul_network(layout: RowLayout, a_row: int, b_row: int, out_row: int, params: PwlFfnParams) -> ReluNetwork:
    """One-hidden-layer network writing ``u[a_row] * u[b_row]`` into ``out_row``."""
    dim = layout.height
    t, coef = _square_units(2.0 * params.bound, params.knots)
    m = t.size
    w1 = np.zeros((2 * m, dim))
    w1[:m, a_row], w1[:m, b_row] = 1.0, 1.0
    w1[m:, a_row], w1[m:, b_row] = 1.0, -1.0
    b1 = -np.concatenate([t, t])
    w2 = np.zeros((dim, 2 * m))
    w2[out_row, :m] = coef / 4.0
    w2[out_row, m:] = -coef / 4.0
    return ReluNetwork((w1, w2), (b1, np.zeros(dim)))


def div_network(layout: RowLayout, a_row: int, b_row: int, out_row: int, params: PwlFfnParams) -> ReluNetwork:
    """Two-hidden-layer network writing ``u[a_row] / u[b_row]`` into ``out_row``.

    The first hidden layer carries ``a`` through and interpolates ``1/b`` on
    ``[-B, -delta] U [delta, B]``; the second forms the product by quarter
    squares.  Operands are balanced by ``lam = 1/sqrt(B delta)`` so both
    quarter-square arguments stay inside ``[-2 sqrt(B/delta), 2 sqrt(B/delta)]``.
    """
    dim = layout.height
    bound, guard = params.bound, params.div_guard
    rk = reciprocal_knots(bound, guard, params.knots)
    g0, rcoef = relu_interpolant(rk, 1.0 / rk)
    m1 = rcoef.size

    w1 = np.zeros((2 + m1, dim))
    w1[0, a_row], w1[1, a_row] = 1.0, -1.0
    w1[2:, b_row] = 1.0
    b1 = np.concatenate([[0.0, 0.0], -rk[:-1]])

    # hidden-1 -> (a, 1/b)
    lift = np.zeros((2, 2 + m1))
    lift[0, 0], lift[0, 1] = 1.0, -1.0
    lift[1, 2:] = rcoef
    lift_b = np.array([0.0, g0])

    lam = 1.0 / np.sqrt(bound * guard)
    t, scoef = _square_units(2.0 * np.sqrt(bound / guard), params.knots)
    m2 = t.size
    mix = np.zeros((2 * m2, 2))
    mix[:m2] = [lam, 1.0 / lam]
    mix[m2:] = [lam, -1.0 / lam]
    w2 = mix @ lift
    b2 = mix @ lift_b - np.concatenate([t, t])

    w3 = np.zeros((dim, 2 * m2))
    w3[out_row, :m2] = scoef / 4.0
    w3[out_row, m2:] = -scoef / 4.0
    return ReluNetwork((w1, w2, w3), (b1, b2, np.zeros(dim)))
