import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml
from pydantic import ValidationError

from app.config import SCENARIOS_DIR, TRUNCATION_RADIUS
from app.models.hybrid import (
    AffineHybridSystem,
    DwellTimeSpec,
    GuardGeometry,
    HybridArc,
    HybridModelError,
    LyapunovDesign,
    Scenario,
)
from app.models.schemas import (
    ControllerConfig,
    DesignConfig,
    DwellConfig,
    DwellKind,
    Feedforward,
    FeedforwardKind,
    GeometryConfig,
    InitialConditions,
    ScenarioConfig,
    StabilityCase,
    SystemConfig,
)
from app.services.hybrid_service import check_inter_jump_time, measure_dwell_time
from app.services.lyapunov_service import planar_geometry
from app.services.tracking_service import InvalidController, make_controller

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised for unreadable or invalid scenario configuration."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line


# Built-in scenarios

def bouncing_ball_config(r: float = TRUNCATION_RADIUS) -> ScenarioConfig:
    """Lossless bouncing ball tracked from (0, 3) against the reference from (0, 10)."""
    gain = [-1.0, -0.5]
    return ScenarioConfig(
        name="bouncing_ball",
        system=SystemConfig(
            A=[[0.0, 1.0], [0.0, 0.0]],
            B=[0.0, 1.0],
            E=[0.0, -9.81],
            L=[[-1.0, 0.0], [0.0, -1.0]],
            H=[0.0, 0.0],
            J=[-1.0, 0.0],
            K=0.0,
            z1=[0.0, 1.0],
            z2=0.0,
            s=-1,
            exclusion_radius=r,
            jump_margin=r,
        ),
        design=DesignConfig(
            P0=[[2.25, 0.5], [0.5, 2.0]],
            Ps=[[2.25, 0.5], [0.5, 2.0]],
            M=[0.0, 0.0],
            lambda_c=-0.25,
            lambda_d=0.0,
        ),
        controller=ControllerConfig(c0=gain, c1=gain),
        initial=InitialConditions(reference=[0.0, 10.0], tracking=[0.0, 3.0]),
        horizon=15.0,
        expected_verdict=StabilityCase.CASE1,
    )


def dissipative_oscillator_config(r: float = TRUNCATION_RADIUS, eps: float = 0.9) -> ScenarioConfig:
    """Forced oscillator against a wall with restitution eps."""
    k, c, x1_bar = 1.0, 0.02, 1.0
    return ScenarioConfig(
        name="dissipative_oscillator",
        system=SystemConfig(
            A=[[0.0, 1.0], [-k, -c]],
            B=[0.0, 1.0],
            E=[0.0, k * x1_bar],
            L=[[-eps, 0.0], [0.0, -eps]],
            H=[0.0, 0.0],
            J=[-1.0, 0.0],
            K=0.0,
            z1=[0.0, 1.0],
            z2=0.0,
            s=-1,
            exclusion_radius=r,
            jump_margin=r,
        ),
        design=DesignConfig(
            P0=[[k, 0.0], [0.0, 1.0]],
            Ps=[[k / eps, 0.0], [0.0, 1.0 / eps]],
            M=[0.0, 0.0],
            lambda_c=0.0,
            lambda_d=math.log(eps),
        ),
        controller=ControllerConfig(c0=[0.0, 0.0], c1=[0.0, 0.0], c2=[0.0, 0.0]),
        feedforward=Feedforward(kind=FeedforwardKind.COSINE, amplitude=100.0, omega=0.4),
        initial=InitialConditions(reference=[50.0, 0.0], tracking=[100.0, 0.0], neighbor=[51.0, 0.0]),
        horizon=100.0,
        dwell=DwellConfig(kind=DwellKind.MAXIMAL_AVERAGE, N0=2.0, measure=True),
        expected_verdict=StabilityCase.CASE3,
    )


BUILTIN_SCENARIOS = {
    "bouncing_ball": bouncing_ball_config,
    "dissipative_oscillator": dissipative_oscillator_config,
}


def bouncing_ball() -> Scenario:
    return scenario_from_config(BUILTIN_SCENARIOS["bouncing_ball"]())


def dissipative_oscillator() -> Scenario:
    return scenario_from_config(BUILTIN_SCENARIOS["dissipative_oscillator"]())


# Config <-> domain objects

def _planar_geometry_for(system: AffineHybridSystem) -> GuardGeometry:
    """Separation constants for 2-D impact models with L = -eps I and D = {0} x (-inf, -r]."""
    L = system.L
    eps = -float(L[0, 0])
    planar = (
        system.n == 2
        and np.allclose(L, -eps * np.eye(2))
        and eps > 0
        and np.allclose(np.abs(system.J), [1.0, 0.0])
        and np.allclose(system.z1, [0.0, 1.0])
        and system.jump_margin > 0
    )
    if not planar:
        raise ConfigError("geometry: required unless the system is a planar impact model", key="geometry")
    return planar_geometry(eps, system.jump_margin)


def scenario_from_config(cfg: ScenarioConfig) -> Scenario:
    feedforward = cfg.feedforward
    try:
        system = AffineHybridSystem(
            A=cfg.system.A,
            B=cfg.system.B,
            E=cfg.system.E,
            L=cfg.system.L,
            H=cfg.system.H,
            J=cfg.system.J,
            K=cfg.system.K,
            z1=cfg.system.z1,
            z2=cfg.system.z2,
            s=cfg.system.s,
            exclusion_radius=cfg.system.exclusion_radius,
            jump_margin=cfg.system.jump_margin,
            flow_input=lambda t, x: float(feedforward(t)),
            name=cfg.name,
        )
        design = LyapunovDesign(
            P0=cfg.design.P0,
            Ps=cfg.design.Ps,
            M=cfg.design.M,
            lambda_c=cfg.design.lambda_c,
            lambda_d=cfg.design.lambda_d,
        )
        if cfg.geometry is not None:
            geometry = GuardGeometry(cfg.geometry.z3, cfg.geometry.z4, cfg.geometry.z5)
        else:
            geometry = _planar_geometry_for(system)
        controller = None
        if cfg.controller is not None:
            c2 = cfg.controller.c2
            if c2 is None:
                logger.info("%s: no c2 given, using c2 = c1 for the S2 feedback gain", cfg.name)
                c2 = cfg.controller.c1
            controller = make_controller(system, design, cfg.controller.c0, cfg.controller.c1, c2, feedforward)
        dwell = None
        if cfg.dwell is not None and cfg.dwell.tau is not None:
            dwell = DwellTimeSpec(tau=cfg.dwell.tau, N0=cfg.dwell.N0, kind=cfg.dwell.kind)
    except (HybridModelError, InvalidController) as e:
        raise ConfigError(f"{cfg.name}: {e}") from e

    def optional(value):
        return None if value is None else np.asarray(value, dtype=float)

    return Scenario(
        name=cfg.name,
        system=system,
        design=design,
        controller=controller,
        geometry=geometry,
        feedforward=feedforward,
        reference_x0=np.asarray(cfg.initial.reference, dtype=float),
        tracking_y0=optional(cfg.initial.tracking),
        neighbor_x0=optional(cfg.initial.neighbor),
        t0=cfg.t0,
        horizon=cfg.horizon,
        dwell=dwell,
        limits=cfg.limits,
        tolerances=cfg.tolerances,
        policy=cfg.policy,
        expected_verdict=cfg.expected_verdict,
        seed=cfg.seed,
        dwell_config=cfg.dwell,
        output_prefix=cfg.output_prefix,
    )


def scenario_to_config(scenario: Scenario) -> ScenarioConfig:
    sys, design = scenario.system, scenario.design

    def listed(value):
        return None if value is None else np.asarray(value, dtype=float).tolist()

    controller = None
    if scenario.controller is not None:
        controller = ControllerConfig(
            c0=listed(scenario.controller.c0),
            c1=listed(scenario.controller.c1),
            c2=listed(scenario.controller.c2),
        )
    dwell = scenario.dwell_config
    if scenario.dwell is not None:
        dwell = DwellConfig(kind=scenario.dwell.kind, tau=scenario.dwell.tau, N0=scenario.dwell.N0)
    return ScenarioConfig(
        name=scenario.name,
        system=SystemConfig(
            A=listed(sys.A), B=listed(sys.B), E=listed(sys.E), L=listed(sys.L), H=listed(sys.H),
            J=listed(sys.J), K=sys.K, z1=listed(sys.z1), z2=sys.z2, s=sys.s,
            exclusion_radius=sys.exclusion_radius, jump_margin=sys.jump_margin,
        ),
        design=DesignConfig(
            P0=listed(design.P0), Ps=listed(design.Ps), M=listed(design.M),
            lambda_c=design.lambda_c, lambda_d=design.lambda_d,
        ),
        controller=controller,
        feedforward=scenario.feedforward,
        geometry=GeometryConfig(z3=scenario.geometry.z3, z4=scenario.geometry.z4, z5=scenario.geometry.z5),
        initial=InitialConditions(
            reference=listed(scenario.reference_x0),
            tracking=listed(scenario.tracking_y0),
            neighbor=listed(scenario.neighbor_x0),
        ),
        t0=scenario.t0,
        horizon=scenario.horizon,
        dwell=dwell,
        limits=scenario.limits,
        tolerances=scenario.tolerances,
        policy=scenario.policy,
        expected_verdict=scenario.expected_verdict,
        seed=scenario.seed,
        output_prefix=scenario.output_prefix,
    )


# YAML

def _node_line(node: yaml.Node, loc: tuple) -> tuple[int, str]:
    """Line (1-based) of the deepest node reachable along loc, and the path walked."""
    walked = []
    for key in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(key):
                    child = value_node
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
        if child is None:
            if isinstance(node, yaml.MappingNode):
                for key_node, _ in node.value:
                    if key_node.value == str(key):
                        return key_node.start_mark.line + 1, ".".join(walked + [str(key)])
            break
        walked.append(str(key))
        node = child
    return node.start_mark.line + 1, ".".join(walked)


def parse_scenario_config(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source}:{line}: invalid YAML: {e}", line=line) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at the top level", line=1)

    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = tuple(part for part in error["loc"] if not isinstance(part, str) or "[" not in part)
        line, _ = _node_line(root, loc)
        key = ".".join(str(part) for part in loc) or "<root>"
        raise ConfigError(f"{source}:{line}: {key}: {error['msg']}", key=key, line=line) from e


def load_scenario_config(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario file {path}: {e}") from e
    return parse_scenario_config(text, str(path))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items() if item is not None}
    if isinstance(value, list):
        return [_plain(item) for item in value]
    return value


def dump_scenario_config(cfg: ScenarioConfig) -> str:
    """YAML text that loads back to an equal config; floats keep their repr digits."""
    return yaml.safe_dump(_plain(cfg.model_dump(mode="json")), sort_keys=False, default_flow_style=None)


def resolve_scenario(name_or_path: Union[str, Path]) -> ScenarioConfig:
    """A built-in scenario name, a bundled scenario file stem, or a path to a YAML file."""
    text = str(name_or_path)
    if text in BUILTIN_SCENARIOS:
        bundled = SCENARIOS_DIR / f"{text}.yaml"
        if bundled.exists():
            return load_scenario_config(bundled)
        return BUILTIN_SCENARIOS[text]()
    return load_scenario_config(name_or_path)


def apply_overrides(
    cfg: ScenarioConfig,
    overrides: Optional[dict[str, str]] = None,
    seed: Optional[int] = None,
    max_jumps: Optional[int] = None,
) -> ScenarioConfig:
    """Override limits/tolerances fields by name, plus the seed and jump cap."""
    data = cfg.model_dump()
    for key, value in (overrides or {}).items():
        if key in data["limits"]:
            data["limits"][key] = value
        elif key in data["tolerances"]:
            data["tolerances"][key] = value
        else:
            raise ConfigError(f"--tol-override: unknown key {key!r}", key=key)
    if seed is not None:
        data["seed"] = seed
    if max_jumps is not None:
        data["limits"]["max_jumps"] = max_jumps
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise ConfigError(f"override {key}: {error['msg']}", key=key) from e


# Dwell time

def resolve_dwell(scenario: Scenario, reference: HybridArc) -> Optional[DwellTimeSpec]:
    """Dwell spec of the combined domain for a scenario.

    A measured maximal spec starts from the mean inter-jump time of the
    reference divided by 0.9, falls back to the tightest measured value when
    that fails on the reference domain, and is halved for the combined domain.
    """
    if scenario.dwell is not None:
        return scenario.dwell
    config = scenario.dwell_config
    if config is None or not config.measure:
        return None
    jumps = reference.domain.jump_count
    if jumps == 0:
        logger.warning("Reference arc has no jumps; no dwell time can be measured")
        return None

    elapsed = reference.t_end - reference.segments[0].t_start
    spec = DwellTimeSpec(tau=elapsed / jumps / 0.9, N0=config.N0, kind=config.kind)
    if not check_inter_jump_time(reference.domain, spec).holds:
        measured = measure_dwell_time(reference.domain, config.kind, config.N0)
        logger.info("Dwell time %.6g fails on the reference; using measured %.6g", spec.tau, measured.tau)
        spec = measured
    combined = replace(spec, tau=spec.tau / 2)
    logger.info("Reference dwell time %.6g (N0=%g); combined domain uses %.6g", spec.tau, spec.N0, combined.tau)
    return combined
