import json
import os
import subprocess
import sys

import numpy as np
import pytest

from click.testing import CliRunner

from safesim.cli import cli, main
from safesim.engine import read_jsonl
from safesim.metrics import aggregate


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, small_model):
    """Scenario library + tiny model + one simulated log, shared per module."""
    ws = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(cli, ["gen-scenarios", str(ws / "scenarios")])
    assert res.exit_code == 0, res.output
    small_model.save(ws / "model.npz")
    return ws


class TestGenScenarios:
    def test_deterministic_reruns(self, tmp_path):
        runner = CliRunner()
        for d in ("a", "b"):
            res = runner.invoke(cli, ["gen-scenarios", str(tmp_path / d)])
            assert res.exit_code == 0
        for name in os.listdir(tmp_path / "a"):
            assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()

    def test_library_size(self, workspace):
        files = os.listdir(workspace / "scenarios")
        assert len([f for f in files if f.endswith(".json")]) >= 12


class TestTrain:
    def test_train_writes_model_and_reference(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(cli, [
            "train", "--out", str(tmp_path / "m.npz"),
            "--reference-out", str(tmp_path / "ref.json"),
            "--episodes", "6", "--iterations", "30", "--hidden-width", "16",
            "--seed", "1"])
        assert res.exit_code == 0, res.output
        assert (tmp_path / "m.npz").exists()
        ref = json.load(open(tmp_path / "ref.json"))
        assert set(ref) == {"edges", "hist"}
        from safesim.diffusion import TrajectoryDenoiser
        m = TrajectoryDenoiser.load(tmp_path / "m.npz")
        assert m.hidden_width == 16


class TestSimulateEvaluate:
    def test_simulate_writes_log_and_svg(self, workspace, tmp_path):
        runner = CliRunner()
        scenario = workspace / "scenarios" / "cross_basic.json"
        out = tmp_path / "run.jsonl"
        svg = tmp_path / "run.svg"
        res = runner.invoke(cli, [
            "simulate", str(scenario), str(workspace / "model.npz"),
            "--out", str(out), "--samples", "2", "--max-duration", "1.5",
            "--seed", "5", "--svg", str(svg)])
        assert res.exit_code == 0, res.output
        log = read_jsonl(out)
        assert log.scenario_name == "cross_basic"
        assert svg.read_text().startswith("<svg")

    def test_simulate_deterministic_given_seed(self, workspace, tmp_path):
        runner = CliRunner()
        scenario = workspace / "scenarios" / "cross_basic.json"
        outs = []
        for name in ("a.jsonl", "b.jsonl"):
            res = runner.invoke(cli, [
                "simulate", str(scenario), str(workspace / "model.npz"),
                "--out", str(tmp_path / name), "--samples", "2",
                "--max-duration", "1.0", "--seed", "9"])
            assert res.exit_code == 0, res.output
            outs.append((tmp_path / name).read_text())
        assert outs[0] == outs[1]

    def test_seed_env_var_default(self, workspace, tmp_path):
        runner = CliRunner()
        scenario = workspace / "scenarios" / "cross_basic.json"
        res = runner.invoke(cli, [
            "simulate", str(scenario), str(workspace / "model.npz"),
            "--out", str(tmp_path / "env.jsonl"), "--samples", "2",
            "--max-duration", "1.0"], env={"SAFESIM_SEED": "9"})
        assert res.exit_code == 0, res.output
        res2 = runner.invoke(cli, [
            "simulate", str(scenario), str(workspace / "model.npz"),
            "--out", str(tmp_path / "flag.jsonl"), "--samples", "2",
            "--max-duration", "1.0", "--seed", "9"])
        assert res2.exit_code == 0
        assert (tmp_path / "env.jsonl").read_text() == (tmp_path / "flag.jsonl").read_text()

    def test_evaluate_round_trips_in_process_metrics(self, workspace, tmp_path, small_model):
        from safesim.engine import SimConfig, run, write_jsonl
        from safesim.scene import ScenarioSpec

        spec = ScenarioSpec.load(workspace / "scenarios" / "cross_basic.json")
        log = run(spec, SimConfig(num_samples=2, max_duration=1.5, seed=0), small_model)
        log_dir = tmp_path / "logs"
        log_dir.mkdir()
        write_jsonl(log, log_dir / "run0.jsonl")
        runner = CliRunner()
        with runner.isolated_filesystem(temp_dir=tmp_path) as fs:
            res = runner.invoke(cli, ["evaluate", str(log_dir), "--out-prefix",
                                      "metrics"])
            assert res.exit_code == 0, res.output
            emitted = json.load(open("metrics.json"))
        expected = aggregate([log])
        for k, v in expected.summary.items():
            got = emitted["summary"][k]
            if isinstance(v, float) and np.isnan(v):
                assert got is None or np.isnan(got)
            else:
                assert got == pytest.approx(v)

    def test_config_file_defaults_and_flag_override(self, workspace, tmp_path):
        runner = CliRunner()
        scenario = workspace / "scenarios" / "cross_basic.json"
        cfg = {"simulate": {"seed": 9, "samples": 2, "max_duration": 1.0}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        res = runner.invoke(cli, [
            "--config", str(cfg_path), "simulate", str(scenario),
            str(workspace / "model.npz"), "--out", str(tmp_path / "c.jsonl")])
        assert res.exit_code == 0, res.output
        res2 = runner.invoke(cli, [
            "simulate", str(scenario), str(workspace / "model.npz"),
            "--out", str(tmp_path / "d.jsonl"), "--samples", "2",
            "--max-duration", "1.0", "--seed", "9"])
        assert (tmp_path / "c.jsonl").read_text() == (tmp_path / "d.jsonl").read_text()
        # explicit flag overrides the config file
        res3 = runner.invoke(cli, [
            "--config", str(cfg_path), "simulate", str(scenario),
            str(workspace / "model.npz"), "--out", str(tmp_path / "e.jsonl"),
            "--seed", "11"])
        assert res3.exit_code == 0
        assert (tmp_path / "e.jsonl").read_text() != (tmp_path / "c.jsonl").read_text()


class TestSweep:
    def test_row_count_and_marginals(self, workspace, tmp_path):
        runner = CliRunner()
        out = tmp_path / "sweep.csv"
        res = runner.invoke(cli, [
            "sweep", "--parameter", "w_ttc", "--values", "0,1",
            "--seeds", "0", "--scenarios",
            str(workspace / "scenarios" / "cross_basic.json"),
            "--model", str(workspace / "model.npz"), "--out", str(out),
            "--samples", "2", "--max-duration", "1.0", "--workers", "1"])
        assert res.exit_code == 0, res.output
        rows = list(open(out))
        # header + |values| x |seeds| x |scenarios| + one marginal per value
        assert len(rows) == 1 + 2 * 1 * 1 + 2
        import csv

        parsed = list(csv.DictReader(open(out)))
        marginals = [r for r in parsed if r["scenario"] == "__marginal__"]
        assert len(marginals) == 2

    def test_bad_parameter_rejected(self, workspace, tmp_path):
        runner = CliRunner()
        res = runner.invoke(cli, [
            "sweep", "--parameter", "w_bogus", "--values", "0",
            "--seeds", "0", "--scenarios",
            str(workspace / "scenarios" / "cross_basic.json"),
            "--model", str(workspace / "model.npz"),
            "--out", str(tmp_path / "x.csv"), "--workers", "1"])
        assert res.exit_code != 0


class TestExitCodes:
    def test_validation_failure_is_one(self, tmp_path):
        code = subprocess.run(
            [sys.executable, "-m", "safesim.cli", "evaluate", str(tmp_path)],
            capture_output=True, text=True)
        assert code.returncode == 1
        err = json.loads(code.stderr.strip().splitlines()[-1])
        assert err["error"] == "validation"

    def test_success_is_zero(self, tmp_path):
        code = subprocess.run(
            [sys.executable, "-m", "safesim.cli", "gen-scenarios",
             str(tmp_path / "lib")], capture_output=True, text=True)
        assert code.returncode == 0
