import json

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from main import EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, cli


def small_config(tmp_path, target="mean_of_g", name="config.yaml", **paths):
    """Three stages on a 20 x 10 grid with a handful of synthetic drives."""
    data = {
        "grid": {"state": {"lower": 0.0, "upper": 60.0, "cells": 20},
                 "control": {"lower": 0.0, "upper": 30.0, "cells": 10}},
        "horizon": 3,
        "constraints": {"default": [{"kind": "moment_equality", "order": 1, "target": target}]},
        "estimation": {"support_floor": 1e-300, "example_policy_form": "empirical"},
        "transitions": {"reference": {"complete": {"a": 0.9820, "b": 0.2591, "sigma2": 2.6118},
                                      "example": {"a": 0.9811, "b": 0.2723, "sigma2": 1.7622}}},
        "initial_state": {"kind": "empirical"},
        "simulation": {"rollouts": 50, "seed": 3, "export_paths": True},
        "synthetic": {"complete_drives": 30, "example_drives": 20},
        "paths": {"complete": [paths.get("complete", "data/complete.csv")],
                  "example": [paths.get("example", "data/example.csv")],
                  "artifacts": paths.get("artifacts", "artifacts")},
        "logging": {"level": "INFO", "file": None},
    }
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def run(config, *commands, extra=()):
    runner = CliRunner()
    results = []
    for command in commands:
        result = runner.invoke(cli, ["--config", str(config), *extra, command])
        results.append(result)
        if result.exit_code != EXIT_OK:
            break
    return results


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("POLICYSMITH_ARTIFACTS_DIR", "POLICYSMITH_LOG_LEVEL", "POLICYSMITH_CONFIG"):
        monkeypatch.delenv(name, raising=False)


class TestPipeline:
    def test_full_run(self, tmp_path):
        config = small_config(tmp_path)
        results = run(config, "generate", "estimate", "check", "synthesize", "simulate")
        assert [r.exit_code for r in results] == [EXIT_OK] * 5, results[-1].output

        artifacts = tmp_path / "artifacts"
        for name in ("g_u.json", "joint_example.json", "f_x_model.json", "g_x_model.json", "x0.json", "policy.json",
                     "report.json", "bands.csv", "paths.csv", "rollouts.json", "synthesis_summary.json"):
            assert (artifacts / name).exists(), name
        assert not (artifacts / "f_x.json").exists()

        feasibility = json.loads((artifacts / "feasibility_report.json").read_text())
        assert feasibility["failures"] == []
        assert feasibility["certificates"]
        assert all(c["slack"] is None for c in feasibility["certificates"])

        bands = pd.read_csv(artifacts / "bands.csv")
        assert list(bands.columns) == ["stage", "mean_x", "std_x", "mean_u", "std_u"]
        assert list(bands["stage"]) == [1, 2, 3]
        paths = pd.read_csv(artifacts / "paths.csv")
        assert len(paths) == 50 * 4
        assert paths.loc[paths["stage"] == 0, "u"].isna().all()

        summary = json.loads((artifacts / "synthesis_summary.json").read_text())
        assert len(summary["b_star"]) == 3
        assert summary["unconverged"] == []

    def test_reruns_are_byte_identical(self, tmp_path):
        outputs = []
        for run_dir in ("first", "second"):
            base = tmp_path / run_dir
            base.mkdir()
            config = small_config(base)
            results = run(config, "generate", "estimate", "synthesize", "simulate")
            assert results[-1].exit_code == EXIT_OK, results[-1].output
            outputs.append({name: (base / "artifacts" / name).read_bytes()
                            for name in ("policy.json", "report.json", "bands.csv")})
        assert outputs[0] == outputs[1]

    def test_out_and_seed_overrides(self, tmp_path):
        config = small_config(tmp_path)
        results = run(config, "generate", "estimate", "synthesize", "simulate",
                      extra=("--out", str(tmp_path / "elsewhere"), "--seed", "11"))
        assert results[-1].exit_code == EXIT_OK, results[-1].output
        assert (tmp_path / "elsewhere" / "policy.json").exists()
        assert not (tmp_path / "artifacts").exists()


class TestExitCodes:
    def test_missing_trajectory_file(self, tmp_path):
        config = small_config(tmp_path, example="missing.csv")
        (result,) = run(config, "estimate")
        assert result.exit_code == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        (result,) = run(tmp_path / "absent.yaml", "check")
        assert result.exit_code == EXIT_USAGE

    def test_missing_artifacts(self, tmp_path):
        config = small_config(tmp_path)
        (result,) = run(config, "simulate")
        assert result.exit_code == EXIT_USAGE

    def test_infeasible_targets(self, tmp_path):
        config = small_config(tmp_path, target="mean_of_g + 100")
        results = run(config, "generate", "estimate", "check")
        assert [r.exit_code for r in results] == [EXIT_OK, EXIT_OK, EXIT_INFEASIBLE]
        feasibility = json.loads((tmp_path / "artifacts" / "feasibility_report.json").read_text())
        assert feasibility["failures"] and feasibility["certificates"] == []
        (result,) = run(config, "synthesize")
        assert result.exit_code == EXIT_INFEASIBLE
        assert not (tmp_path / "artifacts" / "policy.json").exists()
