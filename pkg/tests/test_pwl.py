import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlaformer.constructions import build, build_pointwise, pointwise_prompt
from nlaformer.engine import tf_layer
from nlaformer.pwl import (
    DomainError,
    PwlFfnParams,
    mul_error_bound,
    reciprocal_knots,
    relu_interpolant,
    square_knots,
)


def _apply(op, a, b, ffn):
    layer, layout = build_pointwise(op, len(a), ffn)
    out = tf_layer(pointwise_prompt(layout, a, b, op, ffn), layer)
    return out[layout.row("result")]


class TestInterpolant:
    def test_reproduces_knot_values(self):
        t = np.array([-1.0, 0.0, 0.5, 2.0])
        v = np.array([3.0, -1.0, 0.0, 4.0])
        g0, k = relu_interpolant(t, v)
        ev = g0 + np.maximum(t[:, None] - t[:-1][None, :], 0) @ k
        np.testing.assert_allclose(ev, v, atol=1e-14)

    def test_square_error_within_quarter_h_squared(self):
        R, K = 3.0, 64
        t = square_knots(R, K)
        g0, k = relu_interpolant(t, t * t)
        x = np.linspace(-R, R, 5001)
        g = g0 + np.maximum(x[:, None] - t[:-1][None, :], 0) @ k
        h = 2 * R / K
        err = g - x * x
        assert err.min() >= -1e-12
        assert err.max() <= h * h / 4 + 1e-12

    def test_reciprocal_knots_symmetric(self):
        rk = reciprocal_knots(4.0, 0.1, 16)
        np.testing.assert_allclose(rk, -rk[::-1])
        assert rk.min() == -4.0 and np.min(np.abs(rk)) == pytest.approx(0.1)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            PwlFfnParams(bound=0)
        with pytest.raises(ValueError):
            PwlFfnParams(knots=1)
        with pytest.raises(ValueError):
            PwlFfnParams(bound=1, div_guard=1)


class TestPointwise:
    def test_add_example(self):
        np.testing.assert_array_equal(_apply("add", np.array([1.0, 2.0]), np.array([3.0, 4.0]), PwlFfnParams()),
                                      [4.0, 6.0])

    def test_sub_exact(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
        np.testing.assert_allclose(_apply("sub", a, b, PwlFfnParams()), a - b, rtol=0, atol=1e-12)

    def test_mul_zero_operand_is_exact(self):
        # 0 is a knot of the uniform square grid, and the two quarter squares coincide
        out = _apply("mul", np.zeros(5), np.linspace(-1, 1, 5), PwlFfnParams())
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_mul_bound_b2(self):
        ffn = PwlFfnParams(bound=2.0, knots=256)
        rng = np.random.default_rng(1)
        a, b = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
        err = np.abs(_apply("mul", a, b, ffn) - a * b).max()
        assert err <= mul_error_bound(2.0, 256) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-4, 4), min_size=1, max_size=6), st.integers(0, 1000))
    def test_mul_within_bound_on_domain(self, a, seed):
        a = np.array(a)
        b = np.random.default_rng(seed).uniform(-4, 4, a.size)
        ffn = PwlFfnParams()
        err = np.abs(_apply("mul", a, b, ffn) - a * b).max()
        assert err <= mul_error_bound(ffn.bound, ffn.knots) + 1e-9

    def test_div_accuracy(self):
        ffn = PwlFfnParams(4.0, 256, 0.1)
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, 64)
        b = rng.uniform(0.1, 1, 64) * rng.choice([-1, 1], 64)
        assert np.abs(_apply("div", a, b, ffn) - a / b).max() < 5e-3

    def test_div_guard_violation(self):
        ffn = PwlFfnParams()
        _, layout = build_pointwise("div", 2, ffn)
        with pytest.raises(DomainError):
            pointwise_prompt(layout, [1.0, 1.0], [0.5, 1e-3], "div", ffn)

    def test_out_of_bound_operand(self):
        ffn = PwlFfnParams()
        _, layout = build_pointwise("mul", 1, ffn)
        with pytest.raises(DomainError):
            pointwise_prompt(layout, [5.0], [1.0], "mul", ffn)

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            build_pointwise("pow", 2)

    def test_budget_one_layer_one_head(self):
        con = build("mul", 3)
        assert (con.n_layers, con.n_heads) == (1, 1)
        assert not np.any(con.layers[0].heads[0].w_v)
