import json

import numpy as np
import pytest

from nlaformer.training import PRESETS, SWEEPS, TrainConfig, make_dataset, train


def _tiny(**kw):
    base = dict(n=3, d_embed=8, T=2, K=3, batch=4, steps=20, train_size=16, eval_size=8, eval_every=10)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_json_roundtrip(self):
        cfg = _tiny(lr_schedule=((1e-2, 5), (1e-3, 0)))
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize("kw", [dict(eta=-1), dict(lam=-0.1), dict(K=0), dict(K=4), dict(mode="x"),
                                    dict(teacher="lu")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _tiny(**kw)

    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 3})

    def test_presets(self):
        cfg = PRESETS["toy-joint"]
        assert (cfg.n, cfg.d_embed, cfg.T, cfg.K, cfg.batch, cfg.steps) == (4, 32, 4, 5, 16, 2000)
        assert cfg.eta == 0.0005 and cfg.mode == "joint"
        assert [c.eta for c in SWEEPS["eta-grid"]] == [0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001]
        assert [c.lam for c in SWEEPS["lambda-grid"]] == [13, 10, 7, 4, 1, 0.5]


class TestTrain:
    def test_zero_lr_is_flat(self):
        res = train(_tiny(lr_schedule=((0.0, 0),)))
        losses = [h[1] for h in res.history]
        assert all(v == losses[0] for v in losses)
        assert res.initial_loss == res.final_loss

    def test_deterministic(self):
        a = train(_tiny())
        b = train(_tiny())
        assert [h[1] for h in a.history] == [h[1] for h in b.history]
        assert [h[2].row() for h in a.history] == [h[2].row() for h in b.history]

    @pytest.mark.parametrize("mode,teacher", [("result", "cg"), ("step_solution", "pcg")])
    def test_modes_run_and_reduce(self, mode, teacher):
        res = train(_tiny(mode=mode, teacher=teacher, steps=60))
        assert np.isfinite(res.final_loss)
        assert res.final_loss < res.initial_loss

    def test_pcg_teacher_targets(self):
        d = make_dataset(3, 1.2, 1, 2, 2, teacher="pcg")
        dc = make_dataset(3, 1.2, 1, 2, 2, teacher="cg")
        np.testing.assert_array_equal(d.x_true, dc.x_true)
        assert not np.array_equal(d.x_ref[:, 1], dc.x_ref[:, 1])

    def test_divergence_is_reported(self):
        from nlaformer.training import NumericDivergence
        cfg = _tiny(steps=5, eval_every=100)
        data = make_dataset(3, 1.2, 1, 16, 2)
        data.prompts[:, 0, 1] = np.nan
        with pytest.raises(NumericDivergence, match="first non-finite tensor"):
            train(cfg, train_data=data, eval_data=make_dataset(3, 1.2, 2, 4, 2))
