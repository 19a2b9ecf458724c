from pathlib import Path

import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose

from core.errors import ConfigError
from core.types import ConditionalDensity, Grid
from pipeline.targets import compile_target, resolve_target, row_moments
from services.settings import load_config

REPO_CONFIG = Path(__file__).resolve().parents[1] / "config" / "config.yaml"

MINIMAL = {
    "grid": {"state": {"lower": 0.0, "upper": 10.0, "cells": 5},
             "control": {"lower": 0.0, "upper": 4.0, "cells": 4}},
    "horizon": 3,
    "estimation": {"transition_source": "empirical"},
}


def write_config(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("POLICYSMITH_ARTIFACTS_DIR", raising=False)
    monkeypatch.delenv("POLICYSMITH_LOG_LEVEL", raising=False)


class TestLoadConfig:
    def test_repository_config(self):
        config = load_config(REPO_CONFIG)
        assert config.horizon == 28
        assert config.grid.state.to_grid() == Grid(0.0, 300.0, 300)
        assert config.grid.control.cells == 100
        assert config.transitions.reference["complete"].a == pytest.approx(0.9820)
        assert config.estimation.support_floor == 1e-300
        assert [c.target for c in config.constraints.for_stage(5)] == ["mean_of_g", "4*var_of_g + mean_of_g^2"]
        assert config.paths.artifacts.is_absolute()

    def test_defaults_and_relative_paths(self, tmp_path):
        config = load_config(write_config(tmp_path, MINIMAL))
        assert config.initial_state.kind == "uniform"
        assert config.solver.to_settings().tolerance == 1e-9
        assert config.paths.artifacts == (tmp_path / "artifacts").resolve()

    def test_environment_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("POLICYSMITH_ARTIFACTS_DIR", str(tmp_path / "elsewhere"))
        monkeypatch.setenv("POLICYSMITH_LOG_LEVEL", "debug")
        config = load_config(write_config(tmp_path, MINIMAL))
        assert config.paths.artifacts == tmp_path / "elsewhere"
        assert config.logging.level == "DEBUG"

    def test_workers_override(self, tmp_path):
        config = load_config(write_config(tmp_path, MINIMAL))
        assert config.solver.to_settings(support_floor=1e-12, workers=4).workers == 4
        assert config.solver.to_settings().workers == 1

    @pytest.mark.parametrize("change", [
        {"grid": {"state": {"lower": 1.0, "upper": 1.0, "cells": 5}, "control": MINIMAL["grid"]["control"]}},
        {"horizon": 0},
        {"surprise": True},
        {"estimation": {"transition_source": "reference"}},
        {"constraints": {"stages": {7: []}}},
        {"constraints": {"default": [{"kind": "moment_equality", "order": 1}]}},
        {"constraints": {"default": [{"kind": "bound_probability", "epsilon": 0.1}]}},
        {"initial_state": {"kind": "point"}},
    ])
    def test_invalid_configs(self, tmp_path, change):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, {**MINIMAL, **change}))

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")
        broken = tmp_path / "broken.yaml"
        broken.write_text("grid: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(broken)


class TestTargets:
    @pytest.fixture
    def policy(self):
        state, control = Grid(0.0, 2.0, 2), Grid(0.0, 4.0, 4)
        return ConditionalDensity((state,), control, [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])

    def test_row_moments(self, policy):
        moments = row_moments(policy)
        assert_allclose(moments["mean_of_g"], [1.0, 3.5])
        assert_allclose(moments["var_of_g"], [0.25, 0.0], atol=1e-12)
        assert_allclose(moments["std_of_g"], [0.5, 0.0], atol=1e-6)

    def test_expression(self, policy):
        values = resolve_target("4*var_of_g + mean_of_g^2", row_moments(policy))
        assert_allclose(values, [2.0, 12.25])

    def test_plain_numbers_broadcast(self, policy):
        assert_allclose(resolve_target(1.5, row_moments(policy)), [1.5, 1.5])
        assert_allclose(resolve_target("2", row_moments(policy)), [2.0, 2.0])

    def test_compiled_once(self):
        assert compile_target("mean_of_g + 1") is compile_target("mean_of_g + 1")

    @pytest.mark.parametrize("expression", ["speed_of_light * 2", "mean_of_g +", "mean_of_g > 1"])
    def test_bad_expressions(self, expression):
        with pytest.raises(ConfigError):
            compile_target(expression)

    def test_non_finite_targets(self, policy):
        with np.errstate(divide="ignore"):
            with pytest.raises(ConfigError):
                resolve_target("1/var_of_g", row_moments(policy))
