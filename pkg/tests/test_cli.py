import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from depolab import cli, verify
from depolab.trainer import read_metrics
from depolab.verify import Check, worst

GRID = {
    "name": "cli-grid", "variant": "depo", "seed": 2,
    "env": {"name": "gridworld", "k": 1, "horizon": 30},
    "training": {"epochs": 2, "steps_per_epoch": 60, "grad_steps_per_epoch": 10,
                 "pretrain_steps": 200, "batch_size": 32, "buffer_capacity": 2000,
                 "eval_every": 1, "eval_episodes": 4, "invdyn_interval": 1, "invdyn_max_epochs": 5},
    "algo": {"lr_q": 0.05, "lr_policy": 0.02, "lr_disc": 0.01, "lr_invdyn": 0.003},
    "network": {"invdyn_hidden": [16]},
}
POINTMASS = {
    "name": "cli-pm", "variant": "depo", "seed": 1,
    "env": {"name": "pointmass", "horizon": 30},
    "training": {"epochs": 1, "steps_per_epoch": 30, "grad_steps_per_epoch": 3,
                 "pretrain_steps": 60, "batch_size": 16, "buffer_capacity": 300,
                 "eval_every": 1, "eval_episodes": 2, "invdyn_interval": 1, "invdyn_max_epochs": 2,
                 "demo_trajectories": 1},
    "algo": {"n_mc": 2, "depg_estimator": "pathwise"},
    "network": {k: [8] for k in ("planner_hidden", "invdyn_hidden", "q_hidden", "disc_hidden", "actor_hidden")},
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    cfg = write_config(root, GRID)
    out = root / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestRun:
    def test_outputs_and_manifest(self, grid_run):
        cfg, out = grid_run
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_sha256"] == hashlib.sha256(cfg.read_bytes()).hexdigest()
        assert sorted(p.name for p in out.iterdir()) == manifest["files"]
        assert manifest["seed"] == 2 and manifest["variant"] == "depo"
        assert len(read_metrics(out / "metrics.csv")) > 0

    def test_rerun_is_byte_identical(self, grid_run, tmp_path):
        cfg, out = grid_run
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path, GRID)
        assert cli.main(["run", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 9

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "nope.yaml")]) == 2
        assert "config not found" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        cfg = write_config(tmp_path, {"variant": "depo", "algo": {"gamma": 2.0}})
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_transfer_without_checkpoint_fails(self, tmp_path):
        cfg = write_config(tmp_path, dict(GRID, kind="transfer"))
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1


class TestInspect:
    def test_lists_sections(self, grid_run, capsys):
        _, out = grid_run
        assert cli.main(["inspect-checkpoint", str(out / "checkpoint.npz")]) == 0
        text = capsys.readouterr().out
        for section in ("[planner]", "[inverse_dynamics]", "[q]", "[discriminator]"):
            assert section in text

    def test_missing_and_foreign(self, tmp_path):
        assert cli.main(["inspect-checkpoint", str(tmp_path / "x.npz")]) == 2
        np.savez(tmp_path / "y.npz", values=np.zeros(2))
        assert cli.main(["inspect-checkpoint", str(tmp_path / "y.npz")]) == 1


class TestPlot:
    def test_curves_from_several_files(self, grid_run, tmp_path):
        _, out = grid_run
        files = [str(out / "metrics.csv")] * 3
        assert cli.main(["plot", *files, "--kind", "curves", "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "curves.png").stat().st_size > 0
        rows = list(csv.DictReader(open(tmp_path / "p" / "curves.csv")))
        # identical seeds give a zero-width band
        stds = [r[f"{m}_std"] for r in rows for m in ("success_rate", "mean_return", "planner_mse")]
        assert rows and all(s == "nan" or abs(float(s)) < 1e-12 for s in stds)
        assert all(r["success_rate_n"] == "3" for r in rows)

    def test_plot_outputs_are_reproducible(self, grid_run, tmp_path):
        _, out = grid_run
        ck = str(out / "checkpoint.npz")
        for d in ("a", "b"):
            assert cli.main(["plot", ck, "--kind", "heatmap", "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "heatmap.csv").read_bytes() == (tmp_path / "b" / "heatmap.csv").read_bytes()

    def test_heatmap_table_covers_non_goal_cells(self, grid_run, tmp_path):
        _, out = grid_run
        assert cli.main(["plot", str(out / "checkpoint.npz"), "--kind", "heatmap", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "heatmap.csv")))
        cells = {(int(r["x"]), int(r["y"])) for r in rows}
        assert len(cells) == 35 and (5, 5) not in cells

    def test_rollout(self, tmp_path):
        cfg = write_config(tmp_path, POINTMASS)
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "run")]) == 0
        ck = str(tmp_path / "run" / "checkpoint.npz")
        assert cli.main(["plot", ck, "--kind", "rollout", "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "rollout.png").is_file() and (tmp_path / "p" / "rollout.csv").is_file()
        assert cli.main(["plot", ck, "--kind", "heatmap", "--out", str(tmp_path / "p")]) == 2

    def test_errors(self, tmp_path):
        assert cli.main(["plot", "--kind", "curves"]) == 2
        assert cli.main(["plot", str(tmp_path / "missing.csv")]) == 2
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert cli.main(["plot", str(bad), "--out", str(tmp_path / "p")]) == 1


class TestVerify:
    @pytest.mark.parametrize("suite", ["occupancy", "dominance", "theorem1"])
    def test_fast_suites_pass(self, suite, capsys):
        assert cli.main(["verify", "--suite", suite]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "worst:" in out

    def test_unknown_suite(self):
        assert cli.main(["verify", "--suite", "astrology"]) == 2

    def test_failure_exit_code(self, monkeypatch, capsys):
        monkeypatch.setitem(verify.SUITES, "broken", lambda: [Check("ok", 0.0, 1e-9), Check("bad", 1.0, 1e-9)])
        assert cli.main(["verify", "--suite", "broken"]) == 1
        assert "FAIL  bad" in capsys.readouterr().out


class TestChecks:
    def test_pass_rules(self):
        assert Check("a", 1e-10, 1e-9).passed
        assert not Check("a", float("nan"), 1e-9).passed
        assert Check("gap", 0.7, 0.5, higher_is_better=True).passed
        assert not Check("gap", 0.4, 0.5, higher_is_better=True).passed

    def test_worst_picks_least_slack(self):
        checks = [Check("a", 1e-12, 1e-9), Check("b", 9e-10, 1e-9), Check("c", 0.9, 0.5, True)]
        assert worst(checks).name == "b"
        assert worst(checks + [Check("d", float("nan"), 1.0)]).name == "d"

    def test_usage_errors(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2
