import json
import subprocess
import sys

import numpy as np
import pytest

from nlaformer.artifacts import read_weights
from nlaformer.cli import main


def _run(*args):
    return subprocess.run([sys.executable, "-m", "nlaformer", *args], capture_output=True, text=True)


class TestVerify:
    def test_transpose_sections(self, tmp_path, capsys):
        out = tmp_path / "v.csv"
        assert main(["verify", "--ops", "transpose", "--n", "4", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "layers=1 heads=2 PASS" in text
        rows = out.read_text().strip().splitlines()
        assert rows[0] == "op,n,layers,heads,C,c,ffn_variant,max_error,stage1_error"
        assert len(rows) == 1 + 16
        assert (tmp_path / "v.csv.manifest.json").exists()

    def test_all_ten_sections(self, tmp_path, capsys):
        assert main(["verify", "--ops", "all", "--n", "2", "--grid", "15:1e-3", "--out", str(tmp_path / "a.csv")]) == 0
        text = capsys.readouterr().out
        assert text.count("== ") == 10

    def test_ab_stage_column(self, tmp_path):
        out = tmp_path / "ab.csv"
        assert main(["verify", "--ops", "ab", "--n", "3", "--grid", "default", "--out", str(out)]) == 0
        for row in out.read_text().strip().splitlines()[1:]:
            assert row.split(",")[-1] != ""

    def test_gate_failure_exit_1(self, tmp_path):
        assert main(["verify", "--ops", "inner", "--n", "3", "--C", "2", "--c", "0.5",
                     "--out", str(tmp_path / "f.csv")]) == 1

    def test_usage_errors(self, tmp_path):
        assert main(["verify", "--grid", "nonsense"]) == 2
        assert main(["verify", "--ops", "svd"]) == 2
        assert main(["verify", "--C", "40"]) == 2
        assert _run("verify", "--n", "zero").returncode == 2


class TestCgrun:
    def test_long_csv(self, tmp_path):
        out = tmp_path / "cg.csv"
        assert main(["cgrun", "--n", "4", "--seeds", "4", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "t,series,value"
        assert len(lines) == 1 + 3 * 5

    def test_t_zero(self, tmp_path):
        out = tmp_path / "cg0.csv"
        assert main(["cgrun", "--n", "3", "--seeds", "2", "--T", "0", "--out", str(out)]) == 0
        assert {line.split(",")[0] for line in out.read_text().splitlines()[1:]} == {"0"}

    def test_size_guard(self):
        assert main(["cgrun", "--n", "17"]) == 2


class TestTrainGen:
    def test_train_lr_zero_flat(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--preset", "toy-joint", "--steps", "200", "--lr", "0", "--out", str(out)])
        assert code == 0
        rows = (out / "metrics.csv").read_text().strip().splitlines()
        assert rows[0].startswith("step,loss,rel_err_t0")
        assert rows[0].endswith("int_err_t4,discrepancy")
        assert len({r.split(",", 1)[1] for r in rows[1:]}) == 1
        tensors, cfg = read_weights(out / "weights.nlafw")
        assert cfg["n"] == 4 and "readout" in tensors
        assert (out / "metrics.csv.manifest.json").exists()

    def test_train_config_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"steps": 7, "eta": 0.01, "T": 2, "K": 3}))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--steps", "3", "--teacher", "pcg", "--out", str(out),
                     "--n", "3", "--seed", "2"]) == 0
        manifest = json.loads((out / "metrics.csv.manifest.json").read_text())
        assert manifest["config"]["steps"] == 3
        assert manifest["config"]["eta"] == 0.01
        assert manifest["config"]["teacher"] == "pcg"

    def test_unknown_preset(self):
        assert main(["train", "--preset", "huge"]) == 2

    def test_gen_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["gen", "--n", "3", "--count", "1", "--seed", "7", "--out", str(a)]) == 0
        assert main(["gen", "--n", "3", "--count", "1", "--seed", "7", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_gen_scalar(self, tmp_path):
        p = tmp_path / "s.json"
        assert main(["gen", "--n", "1", "--count", "2", "--out", str(p)]) == 0
        doc = json.loads(p.read_text())
        assert doc["count"] == 2 and len(doc["problems"][0]["A"]) == 1
