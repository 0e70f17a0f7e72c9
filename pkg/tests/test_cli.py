"""
Tests for the koopable command-line interface
"""

import json

import click
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from src.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, Command, cli, execute, main, parse_args
from src.config import CONFIG_DIR

TINY = ["--set", "initial_steps=60", "--set", "seeds=0", "--set", "episode_length=5"]


def _tip_csv(path, shift=0, n=80, dt=0.02):
    t = dt * np.arange(n)
    ref = np.stack([np.sin(2 * np.pi * t / 1.3), np.cos(2 * np.pi * t / 0.9)], axis=1)
    tip = np.roll(ref, shift, axis=0)
    pd.DataFrame({
        "t": t, "tip_x": tip[:, 0], "tip_y": tip[:, 1], "ref_x": ref[:, 0], "ref_y": ref[:, 1],
    }).to_csv(path, index=False)
    return path


class TestParseArgs:
    """Argument parsing"""

    def test_run_with_overrides(self):
        cmd = parse_args(["run", "--config", str(CONFIG_DIR / "arm_rkl_sac.yaml"),
                          "--set", "seeds=1,2", "--set", "update_mode=kl", "--out", "out"])
        assert cmd.verb == "run"
        assert cmd.config_path.name == "arm_rkl_sac.yaml"
        assert cmd.overrides == ("seeds=1,2", "update_mode=kl")
        assert str(cmd.output_dir) == "out"
        assert cmd.verbose is False

    def test_verbose_flag(self):
        assert parse_args(["-v", "bench"]).verbose is True

    def test_verb_options(self):
        cmd = parse_args(["fit", "--seed", "4"])
        assert cmd.options == {"data": None, "seed": 4}

    def test_unknown_verb(self):
        with pytest.raises(click.UsageError):
            parse_args(["train"])

    def test_malformed_override(self):
        with pytest.raises(click.BadParameter):
            parse_args(["run", "--set", "seeds"])

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(click.BadParameter):
            parse_args(["run", "--config", str(tmp_path / "nope.yaml")])

    def test_help(self):
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        for verb in ("collect", "fit", "run", "eval", "converge", "bench", "inspect"):
            assert verb in result.output


class TestMainExitCodes:
    """End-to-end verbs through main()"""

    def test_usage_errors(self, tmp_path):
        assert main(["train"]) == EXIT_USAGE
        assert main(["run", "--set", "=3"]) == EXIT_USAGE
        assert main(["run", "--out", str(tmp_path), "--set", "warp=9"]) == EXIT_USAGE
        assert main(["run", "--out", str(tmp_path), "--set", "controller=pid"]) == EXIT_USAGE

    def test_version(self):
        assert main(["--version"]) == EXIT_OK

    def test_unknown_handler(self, tmp_path):
        assert execute(Command(verb="train", output_dir=tmp_path)) == EXIT_USAGE

    def test_collect_fit_inspect(self, tmp_path):
        assert main(["collect", "--out", str(tmp_path), *TINY]) == EXIT_OK
        dataset = tmp_path / "dataset.csv"
        assert dataset.exists()

        assert main(["fit", "--out", str(tmp_path), "--data", str(dataset), *TINY]) == EXIT_OK
        report = json.loads((tmp_path / "wellposedness.json").read_text(encoding="utf-8"))
        assert report["format_version"] == 1
        assert report["sample_count"] == 60
        assert "wellposedness" in report

        checkpoint = tmp_path / "model.kpt"
        assert main(["inspect", "--out", str(tmp_path), "--checkpoint", str(checkpoint)]) == EXIT_OK
        summary = json.loads((tmp_path / "inspect.json").read_text(encoding="utf-8"))
        assert summary["roundtrip_exact"] is True
        assert summary["n_z"] == 17

    def test_inspect_rejects_garbage(self, tmp_path):
        bogus = tmp_path / "bogus.kpt"
        bogus.write_bytes(b"not a checkpoint\n")
        assert main(["inspect", "--out", str(tmp_path), "--checkpoint", str(bogus)]) == EXIT_USAGE

    def test_run_writes_report_and_trajectories(self, tmp_path):
        assert main(["run", "--out", str(tmp_path), *TINY]) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert report["format_version"] == 1
        assert len(report["episodes"]) == 1
        frame = pd.read_csv(tmp_path / "trajectories" / "seed_0.csv")
        assert len(frame) == 5

    def test_eval(self, tmp_path):
        actual = _tip_csv(tmp_path / "traj.csv", shift=3)
        assert main(["eval", "--out", str(tmp_path), "--actual", str(actual), "--dt", "0.02"]) == EXIT_OK
        metrics = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))["metrics"]
        assert metrics["time_lag"] == pytest.approx(0.06)
        assert metrics["rmse"] > 0.0
        assert metrics["frechet"] > 0.0

    def test_eval_self_reference(self, tmp_path):
        actual = _tip_csv(tmp_path / "traj.csv")
        args = ["eval", "--out", str(tmp_path), "--actual", str(actual), "--reference", str(actual)]
        assert main(args) == EXIT_OK
        metrics = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))["metrics"]
        assert metrics == {"rmse": 0.0, "time_lag": 0.0, "frechet": 0.0}

    def test_eval_too_short(self, tmp_path):
        actual = _tip_csv(tmp_path / "traj.csv", n=5)
        assert main(["eval", "--out", str(tmp_path), "--actual", str(actual)]) == EXIT_USAGE

    def test_eval_constant_series(self, tmp_path):
        path = tmp_path / "flat.csv"
        pd.DataFrame({
            "tip_x": np.ones(40), "tip_y": np.ones(40),
            "ref_x": np.linspace(0, 1, 40), "ref_y": np.linspace(1, 0, 40),
        }).to_csv(path, index=False)
        assert main(["eval", "--out", str(tmp_path), "--actual", str(path)]) == EXIT_NUMERICAL

    def test_converge(self, tmp_path):
        args = [
            "converge", "--out", str(tmp_path),
            "--config", str(CONFIG_DIR / "chain_linear.yaml"),
            "--set", "convergence.checkpoints=20,200",
            "--set", "convergence.seeds=0,1",
        ]
        assert main(args) == EXIT_OK
        data = json.loads((tmp_path / "convergence.json").read_text(encoding="utf-8"))
        assert data["checkpoints"] == [20, 200]
        assert set(data["curves"]) == {"0", "1"}
        assert list(pd.read_csv(tmp_path / "convergence.csv").columns) == ["N", "seed_0", "seed_1", "median"]

    def test_bench(self, tmp_path):
        args = [
            "bench", "--out", str(tmp_path),
            "--set", "bench.dims=3,4",
            "--set", "bench.dataset_sizes=10,20",
            "--set", "bench.repeats=3",
        ]
        assert main(args) == EXIT_OK
        assert len(pd.read_csv(tmp_path / "timing.csv")) == 4
        assert "rls_ratio" in json.loads((tmp_path / "timing.json").read_text(encoding="utf-8"))


def _without_wallclock(data):
    if isinstance(data, dict):
        return {k: _without_wallclock(v) for k, v in data.items() if k != "wallclock"}
    if isinstance(data, list):
        return [_without_wallclock(v) for v in data]
    return data


class TestRunDeterminism:
    """Same config and seeds, same artifacts"""

    def test_repeated_run_matches(self, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        for out in (first, second):
            assert main(["run", "--out", str(out), *TINY]) == EXIT_OK

        reports = [json.loads((out / "report.json").read_text(encoding="utf-8")) for out in (first, second)]
        assert "wallclock" in reports[0]["episodes"][0]
        assert _without_wallclock(reports[0]) == _without_wallclock(reports[1])

        trajectory = ("trajectories", "seed_0.csv")
        assert first.joinpath(*trajectory).read_bytes() == second.joinpath(*trajectory).read_bytes()
