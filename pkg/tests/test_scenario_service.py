import logging
import math

import numpy as np
import pytest

from app.config import SCENARIOS_DIR
from app.models.schemas import DwellKind, StabilityCase
from app.services import scenario_service
from app.services.lyapunov_service import stability_verdict
from app.services.scenario_service import (
    BUILTIN_SCENARIOS,
    ConfigError,
    apply_overrides,
    bouncing_ball_config,
    dissipative_oscillator_config,
    dump_scenario_config,
    load_scenario_config,
    parse_scenario_config,
    resolve_dwell,
    resolve_scenario,
    scenario_from_config,
    scenario_to_config,
)

MINIMAL = """\
name: minimal
system:
  A: [[0.0, 1.0], [0.0, 0.0]]
  B: [0.0, 1.0]
  E: [0.0, -9.81]
  L: [[-1.0, 0.0], [0.0, -1.0]]
  H: [0.0, 0.0]
  J: [-1.0, 0.0]
  K: 0.0
  z1: [0.0, 1.0]
  z2: 0.0
  s: -1
  jump_margin: 0.01
design:
  P0: [[1.0, 0.0], [0.0, 1.0]]
  Ps: [[1.0, 0.0], [0.0, 1.0]]
  M: [0.0, 0.0]
  lambda_c: -0.1
  lambda_d: 0.0
initial:
  reference: [0.0, 1.0]
horizon: 1.0
"""


class TestBundledScenarios:
    def test_files_match_the_builtins(self):
        assert load_scenario_config(SCENARIOS_DIR / "bouncing_ball.yaml") == bouncing_ball_config()
        assert load_scenario_config(SCENARIOS_DIR / "dissipative_oscillator.yaml") == dissipative_oscillator_config()

    def test_resolve_by_name(self):
        assert resolve_scenario("bouncing_ball") == bouncing_ball_config()

    def test_builtins_resolve_without_bundled_files(self, monkeypatch, tmp_path):
        monkeypatch.setattr(scenario_service, "SCENARIOS_DIR", tmp_path)
        for name, builder in BUILTIN_SCENARIOS.items():
            assert resolve_scenario(name) == builder()

    def test_missing_c2_falls_back_to_c1(self, caplog):
        with caplog.at_level(logging.INFO, logger="app.services.scenario_service"):
            scenario = scenario_from_config(resolve_scenario("bouncing_ball"))
        assert "using c2 = c1" in caplog.text
        np.testing.assert_array_equal(scenario.controller.c2, scenario.controller.c1)

    def test_explicit_c2_is_kept(self, caplog):
        cfg = dissipative_oscillator_config()
        with caplog.at_level(logging.INFO, logger="app.services.scenario_service"):
            scenario_from_config(cfg)
        assert "using c2 = c1" not in caplog.text

    def test_resolve_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_scenario(tmp_path / "missing.yaml")

    def test_dump_loads_back(self):
        cfg = dissipative_oscillator_config()
        assert parse_scenario_config(dump_scenario_config(cfg)) == cfg

    def test_scenario_to_config(self, ball):
        cfg = scenario_to_config(ball)
        original = bouncing_ball_config()
        assert cfg.system == original.system
        assert cfg.design == original.design
        assert cfg.controller.c0 == original.controller.c0
        assert cfg.controller.c2 == original.controller.c1
        assert cfg.geometry.z3 == pytest.approx(0.009)


class TestParseErrors:
    def test_minimal_file_parses(self):
        cfg = parse_scenario_config(MINIMAL)
        assert cfg.controller is None
        assert cfg.t0 == 0.0

    def test_unknown_key_is_located(self):
        text = MINIMAL + "colour: red\n"
        with pytest.raises(ConfigError) as info:
            parse_scenario_config(text, "minimal.yaml")
        assert info.value.key == "colour"
        assert info.value.line == text.count("\n")
        assert str(info.value).startswith(f"minimal.yaml:{info.value.line}:")

    def test_bad_value_is_located(self):
        text = MINIMAL.replace("horizon: 1.0", "horizon: -1.0")
        with pytest.raises(ConfigError) as info:
            parse_scenario_config(text)
        assert info.value.key == "horizon"
        assert info.value.line == text.count("\n")

    def test_dimension_mismatch_names_the_section(self):
        text = MINIMAL.replace("B: [0.0, 1.0]", "B: [0.0, 1.0, 2.0]")
        with pytest.raises(ConfigError) as info:
            parse_scenario_config(text)
        assert info.value.key == "system"
        assert "B" in str(info.value)

    def test_invalid_yaml(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario_config("name: x\nsystem: [1, 2\n")
        assert "invalid YAML" in str(info.value)
        assert info.value.line is not None

    def test_top_level_must_be_a_mapping(self):
        with pytest.raises(ConfigError):
            parse_scenario_config("- 1\n- 2\n")


class TestScenarioFromConfig:
    def test_planar_geometry_is_derived(self, ball):
        assert ball.geometry.z3 == pytest.approx(0.009)
        assert ball.geometry.z5 == pytest.approx(0.99 / math.sqrt(2.0))

    def test_geometry_required_off_the_planar_case(self):
        cfg = parse_scenario_config(MINIMAL.replace("jump_margin: 0.01", "jump_margin: 0.0"))
        with pytest.raises(ConfigError) as info:
            scenario_from_config(cfg)
        assert info.value.key == "geometry"

    def test_model_errors_become_config_errors(self):
        cfg = parse_scenario_config(MINIMAL.replace("P0: [[1.0, 0.0], [0.0, 1.0]]", "P0: [[1.0, 0.0], [0.0, -1.0]]"))
        with pytest.raises(ConfigError):
            scenario_from_config(cfg)


class TestOverrides:
    def test_limits_and_tolerances(self):
        cfg = apply_overrides(bouncing_ball_config(), {"rtol": "1e-9", "tie_band": "0"}, seed=7, max_jumps=5)
        assert cfg.limits.rtol == 1e-9
        assert cfg.tolerances.tie_band == 0.0
        assert cfg.seed == 7
        assert cfg.limits.max_jumps == 5

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            apply_overrides(bouncing_ball_config(), {"colour": "red"})
        assert info.value.key == "colour"

    def test_out_of_range_value(self):
        with pytest.raises(ConfigError) as info:
            apply_overrides(bouncing_ball_config(), {"sample_dt": "0.1"})
        assert info.value.key == "limits.sample_dt"


class TestResolveDwell:
    def test_ball_has_no_dwell_requirement(self, ball, ball_reference):
        assert resolve_dwell(ball, ball_reference) is None

    def test_oscillator_dwell_is_measured(self, oscillator, oscillator_reference):
        dwell = resolve_dwell(oscillator, oscillator_reference)
        assert dwell.kind == DwellKind.MAXIMAL_AVERAGE
        assert dwell.N0 == 2.0
        assert 0 < dwell.tau < math.inf
        assert stability_verdict(oscillator.design, dwell).case == StabilityCase.CASE3

    def test_explicit_dwell_wins(self, oscillator_reference):
        cfg = dissipative_oscillator_config()
        explicit = cfg.model_copy(update={"dwell": cfg.dwell.model_copy(update={"tau": 4.0, "measure": False})})
        scenario = scenario_from_config(explicit)
        assert resolve_dwell(scenario, oscillator_reference).tau == 4.0
