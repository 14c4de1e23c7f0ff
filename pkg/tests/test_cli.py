from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import pytest

from crl_risklab.cli import parse_grid, run
from crl_risklab.errors import UsageError
from crl_risklab.probspace import two_point_problem


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestGrid:
    def test_geometric(self):
        assert parse_grid("8:64:x2") == [8, 16, 32, 64]
        assert parse_grid("1:100:x10") == [1, 10, 100]

    def test_list(self):
        assert parse_grid("1,4, 16") == [1, 4, 16]

    @pytest.mark.parametrize("bad", ["8:64", "8:64:2", "64:8:x2", "1:8:x1", "a,b"])
    def test_bad(self, bad):
        with pytest.raises(UsageError):
            parse_grid(bad)


class TestValidate:
    def test_problem_file(self, tmp_path, capsys):
        path = tmp_path / "p.json"
        two_point_problem().to_json(path)
        assert run(["validate", "--problem", str(path), "--out", str(tmp_path / "o")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["auc_optimum"] == pytest.approx(0.65)
        assert summary["optimal_risk"] == pytest.approx(-0.19274475702175745)

    def test_manifest_hashes(self, tmp_path):
        out = tmp_path / "o"
        assert run(["validate", "--random", "2x3", "--out", str(out), "--seed", "4"]) == 0
        man = _manifest(out)
        assert man["seed"] == 4
        assert {"numpy", "scipy", "python", "git_describe"} <= set(man["versions"])
        for name, digest in man["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest

    def test_bad_problem_exits_1(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"anchor_marginal": [1.0], "pos_cond": [[0.5, 0.6]], "neg_cond": [[0.5, 0.5]], "temperature": 1.0}))
        assert run(["validate", "--problem", str(path), "--out", str(tmp_path)]) == 1

    def test_missing_problem(self, tmp_path):
        assert run(["validate", "--out", str(tmp_path)]) == 1


class TestUsage:
    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_no_command(self):
        assert run([]) == 1

    def test_bad_option(self, tmp_path):
        assert run(["calibration", "--problems", "many", "--out", str(tmp_path)]) == 1

    def test_config_defaults(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"problems": 2, "scorers": 3}))
        out = tmp_path / "o"
        assert run(["calibration", "--config", str(cfg), "--scorers", "2", "--out", str(out)]) == 0
        assert _manifest(out)["config"]["problems"] == 2
        assert _manifest(out)["config"]["scorers"] == 2
        assert len((out / "calibration.csv").read_text().splitlines()) == 5

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert run(["calibration", "--config", str(cfg), "--out", str(tmp_path)]) == 1


class TestCommands:
    def test_calibration_csv(self, tmp_path):
        out = tmp_path / "o"
        assert run(["calibration", "--problems", "3", "--scorers", "2", "--seed", "7", "--out", str(out)]) == 0
        lines = (out / "calibration.csv").read_text().splitlines()
        assert lines[0] == "problem_seed,scorer_seed,lhs,rhs,slack" and len(lines) == 7

    def test_calibration_json(self, tmp_path):
        out = tmp_path / "o"
        assert run(["calibration", "--problems", "2", "--scorers", "2", "--format", "json", "--out", str(out)]) == 0
        doc = json.loads((out / "calibration.json").read_text())
        assert set(doc) == {"meta", "data"} and len(doc["data"]["rows"]) == 4

    def test_oce_check(self, tmp_path, capsys):
        assert run(["oce-check", "--instances", "50", "--out", str(tmp_path)]) == 0
        assert json.loads(capsys.readouterr().out)["max_deviation"] <= 1e-9

    def test_dro_check(self, tmp_path):
        assert run(["dro-check", "--instances", "30", "--grid-instances", "6", "--out", str(tmp_path)]) == 0

    def test_scaling(self, tmp_path):
        out = tmp_path / "o"
        code = run(["scaling", "--mode", "inner_m_scrl", "--grid", "8:128:x4", "--trials", "1000", "--out", str(out)])
        assert code == 0
        assert (out / "scaling.csv").read_text().splitlines()[0] == "sweep_var,mean_err,se,trials"

    def test_scaling_insufficient_trials(self, tmp_path):
        code = run(["scaling", "--mode", "inner_m_sscrl_bias", "--grid", "256,1024", "--trials", "100", "--out", str(tmp_path)])
        assert code == 1

    def test_gap(self, tmp_path):
        assert run(["gap", "--trials", "100", "--hypotheses", "2", "--out", str(tmp_path)]) == 0
        assert "gap.json" in _manifest(tmp_path)["files"]

    def test_critical_m_small(self, tmp_path):
        args = ["critical-m", "--n-grid", "16", "--m-grid", "1,8", "--seeds", "2", "--iters", "20", "--delta", "1.0"]
        assert run(args + ["--out", str(tmp_path)]) == 0

    def test_train(self, tmp_path):
        path = tmp_path / "p.json"
        two_point_problem().to_json(path)
        out = tmp_path / "o"
        assert run(["train", "--problem", str(path), "--phi", "mean_variance", "--out", str(out)]) == 0
        assert (out / "trace.csv").read_text().startswith("iter,risk,grad_norm,auc")

    def test_train_cvar_rejected(self, tmp_path):
        path = tmp_path / "p.json"
        two_point_problem().to_json(path)
        assert run(["train", "--problem", str(path), "--phi", "cvar", "--out", str(tmp_path)]) == 1

    def test_consistency(self, tmp_path):
        assert run(["consistency", "--random", "2x3", "--out", str(tmp_path)]) == 0

    def test_zero_shot(self, tmp_path, capsys):
        cls = tmp_path / "c.json"
        cls.write_text(json.dumps({"class_prior": [0.5, 0.5], "item_dist": [[0.7, 0.3], [0.2, 0.8]]}))
        path = tmp_path / "p.json"
        two_point_problem().to_json(path)
        assert run(["zero-shot", "--problem", str(path), "--classes", str(cls), "--out", str(tmp_path)]) == 0
        post = json.loads(capsys.readouterr().out)
        assert sum(post["normalized"]) == pytest.approx(1.0)


class TestReproducible:
    def test_byte_identical(self, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"o{k}"
            assert run(["calibration", "--problems", "3", "--scorers", "3", "--seed", "11", "--out", str(out)]) == 0
            outs.append((out / "calibration.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_console_entry(self, tmp_path):
        res = subprocess.run(
            [sys.executable, "-m", "crl_risklab", "validate", "--random", "1x2", "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert res.returncode == 0 and "auc_optimum" in res.stdout
