import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from app.config import EXIT_CODES, FIGURES_VERSION, OUTPUT_DIR, WORKERS
from app.models.hybrid import HybridArc, LyapunovDesign, Scenario
from app.models.schemas import (
    CertificateSection,
    RunReport,
    RunStatus,
    StabilityCase,
    Termination,
)
from app.services.combined_service import (
    CombinedServiceError,
    jump_mismatch,
    reparameterize,
    simulate_combined,
)
from app.services.distance_service import DistanceServiceError, distance_profile, euclidean_profile
from app.services.hybrid_service import HybridServiceError, simulate
from app.services.lyapunov_service import (
    GuardSampler,
    LyapunovServiceError,
    check_flow_lmis,
    check_jump_conditions,
    class_k_bounds,
    derive_constants,
    estimate_sublevel,
    stability_verdict,
    verify_assumption3,
)
from app.services.progress_service import progress_service
from app.services.report_service import (
    arc_csv,
    combined_csv,
    combined_jump_rows,
    control_csv,
    profile_csv,
    region_csv,
    render_csv,
    sanitize_filename,
    simulation_summary,
    write_report,
    write_text,
)
from app.services.scenario_service import (
    ConfigError,
    apply_overrides,
    resolve_dwell,
    resolve_scenario,
    scenario_from_config,
)
from app.services.tracking_service import TrackingServiceError, closed_loop_simulate

logger = logging.getLogger(__name__)

SIMULATION_ERRORS = (HybridServiceError, CombinedServiceError, DistanceServiceError, TrackingServiceError)


@dataclass
class CommandOptions:
    """Options shared by all commands; `config` is a path or a bundled scenario name."""
    config: Optional[str] = None
    out_dir: Path = OUTPUT_DIR
    overrides: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    max_jumps: Optional[int] = None


@dataclass
class Outputs:
    """Files to write (relative name -> text) and the report they belong to."""
    report: RunReport
    files: dict[str, str] = field(default_factory=dict)


def load_scenario(options: CommandOptions, name: Optional[str] = None) -> Scenario:
    source = name or options.config
    if source is None:
        raise ConfigError("--config is required")
    cfg = resolve_scenario(source)
    cfg = apply_overrides(cfg, options.overrides, options.seed, options.max_jumps)
    return scenario_from_config(cfg)


def _prefix(scenario: Scenario) -> str:
    return sanitize_filename(scenario.output_prefix or scenario.name)


def _abnormal(*terminations: Termination) -> bool:
    return any(termination != Termination.HORIZON_REACHED for termination in terminations)


def _reference(scenario: Scenario) -> HybridArc:
    return simulate(
        scenario.system, scenario.reference_x0, scenario.t0, scenario.horizon, limits=scenario.limits,
    )


# Pipelines (synchronous, run in worker threads)

def simulation_outputs(scenario: Scenario) -> Outputs:
    """Open-loop arcs from every initial condition of the scenario."""
    prefix = _prefix(scenario)
    report = RunReport(scenario=scenario.name, command="simulate")
    outputs = Outputs(report=report)
    starts = [("reference", scenario.reference_x0), ("neighbor", scenario.neighbor_x0), ("tracking", scenario.tracking_y0)]
    for trajectory, x0 in starts:
        if x0 is None:
            continue
        try:
            arc = simulate(scenario.system, x0, scenario.t0, scenario.horizon, limits=scenario.limits)
        except HybridServiceError as e:
            report.errors.append(f"{trajectory}: {e}")
            report.exit_code = EXIT_CODES["abnormal_termination"]
            continue
        name = f"{prefix}_{trajectory}.csv"
        outputs.files[name] = arc_csv(arc)
        report.simulations.append(simulation_summary(trajectory, arc, file=name))
        if _abnormal(arc.termination):
            report.exit_code = EXIT_CODES["abnormal_termination"]
    return outputs


def certificate_section(scenario: Scenario) -> tuple[CertificateSection, Optional[LyapunovDesign]]:
    """Run every certificate check; failures are collected, not raised."""
    sys, geometry, tolerances = scenario.system, scenario.geometry, scenario.tolerances
    section = CertificateSection()
    design = None

    try:
        sampler = GuardSampler(sys, seed=scenario.seed)
        section.assumption3 = verify_assumption3(sys, geometry, sampler, samples=tolerances.assumption_samples)
    except LyapunovServiceError as e:
        section.errors.append(f"guard separation: {e}")

    try:
        section.jump_conditions = check_jump_conditions(scenario.design, sys, tolerances.tol_psd)
        if scenario.controller is not None:
            section.flow_lmis = check_flow_lmis(sys, scenario.design, scenario.controller, tolerances.tol_psd)
        section.sublevel = estimate_sublevel(sys, scenario.design, geometry, tolerances.safety_factor)
        section.class_k = class_k_bounds(sys, scenario.design, geometry)
        design = derive_constants(sys, scenario.design, geometry)
    except LyapunovServiceError as e:
        section.errors.append(str(e))

    dwell = scenario.dwell
    if dwell is None and scenario.dwell_config is not None:
        try:
            dwell = resolve_dwell(scenario, _reference(scenario))
        except HybridServiceError as e:
            section.errors.append(f"dwell time: {e}")
    section.verdict = stability_verdict(design or scenario.design, dwell)
    return section, design


def certificate_failed(scenario: Scenario, section: CertificateSection) -> bool:
    checks = (section.jump_conditions, section.flow_lmis)
    if section.errors or any(check is not None and not check.ok for check in checks):
        return True
    verdict = section.verdict.case if section.verdict is not None else StabilityCase.INCONCLUSIVE
    if scenario.expected_verdict is not None:
        return verdict != scenario.expected_verdict
    return False


def certify_outputs(scenario: Scenario) -> Outputs:
    section, _ = certificate_section(scenario)
    report = RunReport(scenario=scenario.name, command="certify", certificate=section)
    if certificate_failed(scenario, section):
        report.exit_code = EXIT_CODES["certificate_infeasible"]
    logger.info("%s: verdict %s", scenario.name, section.verdict.case.value)
    return Outputs(report=report)


def tracking_outputs(scenario: Scenario) -> Outputs:
    """Closed-loop run of the tracking controller against the stored reference."""
    if scenario.controller is None:
        raise ConfigError(f"{scenario.name}: tracking needs a controller section", key="controller")
    if scenario.tracking_y0 is None:
        raise ConfigError(f"{scenario.name}: tracking needs initial.tracking", key="initial.tracking")

    prefix = _prefix(scenario)
    section, design = certificate_section(scenario)
    report = RunReport(scenario=scenario.name, command="track", certificate=section)
    outputs = Outputs(report=report)
    try:
        reference = _reference(scenario)
        controller = replace(scenario.controller, reference=reference)
        run = closed_loop_simulate(
            scenario.system,
            design or scenario.design,
            controller,
            scenario.tracking_y0,
            scenario.t0,
            scenario.horizon,
            limits=scenario.limits,
            tolerances=scenario.tolerances,
            policy=scenario.policy,
            kbar_max=scenario.tolerances.kbar_max,
        )
    except SIMULATION_ERRORS as e:
        report.errors.append(str(e))
        report.exit_code = EXIT_CODES["abnormal_termination"]
        return outputs

    combined = run.combined
    arc_x, arc_y, _, _ = reparameterize(combined)
    monitor = run.monitor
    mismatch = jump_mismatch(combined)
    files = {
        f"{prefix}_reference.csv": arc_csv(arc_x),
        f"{prefix}_tracking.csv": arc_csv(arc_y),
        f"{prefix}_combined.csv": combined_csv(combined),
        f"{prefix}_euclidean_error.csv": profile_csv(run.euclidean, "euclidean_error"),
        f"{prefix}_distance_d.csv": profile_csv(run.distance, "d"),
        f"{prefix}_lyapunov_V.csv": render_csv(
            ["t", "j", "V", "region"],
            ([tk, int(jk), vk, rk.value] for tk, jk, vk, rk in zip(monitor.t, monitor.j, monitor.values, monitor.regions)),
        ),
        f"{prefix}_control_u.csv": control_csv(run.control),
        f"{prefix}_region.csv": region_csv(run.control),
        f"{prefix}_jump_mismatch.csv": render_csv(["t_x", "t_y", "mismatch"], mismatch.tolist()),
    }
    outputs.files.update(files)

    report.simulations.append(simulation_summary("reference", arc_x))
    report.simulations.append(simulation_summary("tracking", arc_y))
    combined_summary = simulation_summary("combined", arc_x)
    report.simulations.append(combined_summary.model_copy(update={
        "termination": combined.termination,
        "jumps": combined_jump_rows(combined),
        "file": f"{prefix}_combined.csv",
    }))
    report.monitor = monitor.summary()
    if _abnormal(combined.termination):
        report.exit_code = EXIT_CODES["abnormal_termination"]
    return outputs


def neighbor_outputs(scenario: Scenario) -> Outputs:
    """Open-loop reference and neighboring trajectory on one combined domain."""
    if scenario.neighbor_x0 is None:
        raise ConfigError(f"{scenario.name}: needs initial.neighbor", key="initial.neighbor")
    prefix = f"{_prefix(scenario)}_open_loop"
    report = RunReport(scenario=scenario.name, command="figures")
    outputs = Outputs(report=report)
    try:
        combined = simulate_combined(
            scenario.system,
            scenario.reference_x0,
            scenario.neighbor_x0,
            scenario.t0,
            scenario.horizon,
            limits=scenario.limits,
            policy=scenario.policy,
        )
        distance = distance_profile(scenario.system, combined, scenario.tolerances.kbar_max)
    except SIMULATION_ERRORS as e:
        report.errors.append(str(e))
        report.exit_code = EXIT_CODES["abnormal_termination"]
        return outputs

    arc_x, arc_y, _, _ = reparameterize(combined)
    outputs.files.update({
        f"{prefix}_reference.csv": arc_csv(arc_x),
        f"{prefix}_neighbor.csv": arc_csv(arc_y),
        f"{prefix}_combined.csv": combined_csv(combined),
        f"{prefix}_euclidean_error.csv": profile_csv(euclidean_profile(combined), "euclidean_error"),
        f"{prefix}_distance_d.csv": profile_csv(distance, "d"),
    })
    report.simulations.append(simulation_summary("reference", arc_x))
    report.simulations.append(simulation_summary("neighbor", arc_y))
    if _abnormal(combined.termination):
        report.exit_code = EXIT_CODES["abnormal_termination"]
    return outputs


# Commands

async def _write(outputs: Outputs, out_dir: Path, stem: str) -> list[Path]:
    written = []
    for name in sorted(outputs.files):
        written.append(await write_text(out_dir / name, outputs.files[name]))
    outputs.report.files = sorted(outputs.files) + [f"{stem}.json", f"{stem}.txt"]
    written.extend(await write_report(outputs.report, out_dir, stem))
    return written


async def _run_command(
    command: str,
    options: CommandOptions,
    pipeline: Callable[[Scenario], Outputs],
    status: RunStatus,
    run_id: Optional[str] = None,
) -> RunReport:
    run_id = run_id or command
    progress_service.create_run(run_id)
    progress_service.update_progress(run_id, RunStatus.LOADING, "Loading scenario...")
    try:
        scenario = load_scenario(options)
        progress_service.update_progress(run_id, status, f"Running {command} on {scenario.name}...")
        outputs = await asyncio.to_thread(pipeline, scenario)
        progress_service.update_progress(run_id, RunStatus.WRITING, "Writing outputs...")
        written = await _write(outputs, Path(options.out_dir), f"{_prefix(scenario)}_{command}")
        progress_service.set_completed(run_id, [str(path) for path in written])
    except ConfigError as e:
        progress_service.set_error(run_id, str(e))
        raise
    finally:
        progress_service.cleanup_run(run_id)
    return outputs.report


async def cmd_simulate(options: CommandOptions) -> RunReport:
    """Simulate the scenario's open-loop trajectories and write one CSV per trajectory."""
    return await _run_command("simulate", options, simulation_outputs, RunStatus.SIMULATING)


async def cmd_certify(options: CommandOptions) -> RunReport:
    """Check the Lyapunov certificate of the scenario and write the report."""
    return await _run_command("certify", options, certify_outputs, RunStatus.CERTIFYING)


async def cmd_track(options: CommandOptions) -> RunReport:
    """Run the tracking controller and write the error, d, V, u and region profiles."""
    return await _run_command("track", options, tracking_outputs, RunStatus.TRACKING)


FIGURE_JOBS: list[tuple[str, str, Callable[[Scenario], Outputs]]] = [
    ("bouncing_ball_tracking", "bouncing_ball", tracking_outputs),
    ("dissipative_oscillator_open_loop", "dissipative_oscillator", neighbor_outputs),
    ("dissipative_oscillator_tracking", "dissipative_oscillator", tracking_outputs),
]


async def cmd_figures(options: CommandOptions) -> list[RunReport]:
    """Regenerate all figure data sets into output/figures/v<version>/.

    Scenarios run in parallel worker threads; each is tracked as its own run.
    """
    out_dir = Path(options.out_dir) / "figures" / f"v{FIGURES_VERSION}"
    loop = asyncio.get_running_loop()

    async def run_job(executor: ThreadPoolExecutor, job_id: str, scenario_name: str, pipeline) -> RunReport:
        progress_service.create_run(job_id)
        progress_service.update_progress(job_id, RunStatus.LOADING, f"Loading {scenario_name}...")
        try:
            scenario = load_scenario(options, scenario_name)
            progress_service.update_progress(job_id, RunStatus.SIMULATING, "Computing figure data...")
            outputs = await loop.run_in_executor(executor, pipeline, scenario)
            outputs.report.command = "figures"
            progress_service.update_progress(job_id, RunStatus.WRITING, "Writing figure data...")
            written = await _write(outputs, out_dir / job_id, job_id)
            progress_service.set_completed(job_id, [str(path) for path in written])
        except ConfigError as e:
            progress_service.set_error(job_id, str(e))
            return RunReport(scenario=scenario_name, command="figures", errors=[str(e)],
                             exit_code=EXIT_CODES["config_error"])
        except Exception as e:
            logger.exception("Figure job %s failed", job_id)
            progress_service.set_error(job_id, f"Figure job failed: {e}")
            return RunReport(scenario=scenario_name, command="figures", errors=[str(e)],
                             exit_code=EXIT_CODES["abnormal_termination"])
        finally:
            progress_service.cleanup_run(job_id)
        return outputs.report

    with ThreadPoolExecutor(max_workers=max(WORKERS, 1)) as executor:
        return list(await asyncio.gather(*(
            run_job(executor, job_id, scenario_name, pipeline)
            for job_id, scenario_name, pipeline in FIGURE_JOBS
        )))


def exit_code(reports: list[RunReport]) -> int:
    """The most severe exit code among the reports."""
    codes = [report.exit_code for report in reports]
    return max(codes, default=EXIT_CODES["ok"])
