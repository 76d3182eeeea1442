import numpy as np
import pytest

from nlaformer.training import AdamState, adam_step, lr_at


class TestAdam:
    def test_first_step_by_hand(self):
        g = np.array([1.0, -2.0])
        p, _ = adam_step({"w": np.zeros(2)}, {"w": g}, AdamState(), 0.1)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        np.testing.assert_allclose(p["w"], -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-15)
        np.testing.assert_allclose(p["w"], [-0.1, 0.1], rtol=1e-7)

    def test_zero_gradient_no_move(self):
        w = np.array([[1.0, 2.0]])
        state = AdamState()
        for _ in range(5):
            out, state = adam_step({"w": w}, {"w": np.zeros_like(w)}, state, 0.5)
            np.testing.assert_array_equal(out["w"], w)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p, s = {"w": rng.standard_normal(3)}, AdamState()
            for _ in range(100):
                p, s = adam_step(p, {"w": 2 * p["w"] - 1}, s, 1e-2)
            return p["w"]
        np.testing.assert_array_equal(run(), run())

    def test_shape_check(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


def test_schedule():
    sched = [(1e-3, 10), (3e-4, 5), (1e-4, 0)]
    assert lr_at(sched, 0) == 1e-3
    assert lr_at(sched, 9) == 1e-3
    assert lr_at(sched, 10) == 3e-4
    assert lr_at(sched, 15) == 1e-4
    assert lr_at(sched, 10**6) == 1e-4
