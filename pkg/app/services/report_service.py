import csv
import io
import logging
import os
import re
import uuid
from pathlib import Path
from typing import Iterable, Optional, Sequence

import aiofiles
import aiofiles.os
import numpy as np

from app.config import CSV_DIGITS
from app.models.hybrid import CombinedArc, HybridArc
from app.models.schemas import (
    CertificateSection,
    JumpRow,
    RunReport,
    SimulationSummary,
)
from app.services.distance_service import Profile
from app.services.tracking_service import ControlProfile

logger = logging.getLogger(__name__)


def sanitize_filename(filename: str) -> str:
    """Sanitize filename for filesystem compatibility."""
    sanitized = re.sub(r'[<>:"/\\|?*\s]', '_', filename)
    sanitized = sanitized[:100]
    return sanitized.strip("._") or "scenario"


def format_number(value: float) -> str:
    """17 significant digits, enough for an exact double round trip."""
    return f"{float(value):.{CSV_DIGITS}g}"


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([cell if isinstance(cell, str) else _cell(cell) for cell in row])
    return buffer.getvalue()


def _cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format_number(value)


def _state_header(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


# CSV tables

def arc_csv(arc: HybridArc) -> str:
    """Columns t, j, x1..xn; jump instants appear as (t, j) then (t, j+1)."""
    t, j, x = arc.samples()
    rows = ([tk, int(jk), *xk] for tk, jk, xk in zip(t, j, x))
    return render_csv(["t", "j", *_state_header("x", x.shape[1])], rows)


def combined_csv(combined: CombinedArc) -> str:
    t, j, x, y = combined.samples()
    jx = np.asarray(combined.jx)[j]
    jy = np.asarray(combined.jy)[j]
    rows = (
        [tk, int(jk), int(a), int(b), *xk, *yk]
        for tk, jk, a, b, xk, yk in zip(t, j, jx, jy, x, y)
    )
    n = x.shape[1]
    return render_csv(["t", "j", "jx", "jy", *_state_header("x", n), *_state_header("y", n)], rows)


def profile_csv(profile: Profile, column: str) -> str:
    rows = ([tk, int(jk), vk] for tk, jk, vk in zip(profile.t, profile.j, profile.values))
    return render_csv(["t", "j", column], rows)


def control_csv(control: ControlProfile) -> str:
    rows = ([tk, int(jk), uk] for tk, jk, uk in zip(control.t, control.j, control.values))
    return render_csv(["t", "j", "u"], rows)


def region_csv(control: ControlProfile) -> str:
    rows = ([tk, int(jk), f"S{int(rk)}"] for tk, jk, rk in zip(control.t, control.j, control.regions))
    return render_csv(["t", "j", "region"], rows)


def jump_rows(arc: HybridArc, component: str = "x") -> list[JumpRow]:
    return [
        JumpRow(t=jump.t, j=jump.j, component=component, pre=jump.pre.tolist(), post=jump.post.tolist())
        for jump in arc.jumps
    ]


def combined_jump_rows(combined: CombinedArc) -> list[JumpRow]:
    rows = []
    for jump in combined.jumps:
        pre, post = (jump.pre_x, jump.post_x) if jump.component == "x" else (jump.pre_y, jump.post_y)
        rows.append(JumpRow(t=jump.t, j=jump.j, component=jump.component, pre=pre.tolist(), post=post.tolist()))
    return rows


def simulation_summary(name: str, arc: HybridArc, file: Optional[str] = None) -> SimulationSummary:
    return SimulationSummary(trajectory=name, termination=arc.termination, jumps=jump_rows(arc), file=file)


# Reports

def _margin_line(label: str, values) -> str:
    return f"  {label}: " + ", ".join(format_number(v) for v in values)


def _certificate_lines(section: CertificateSection) -> list[str]:
    lines = ["Certificate"]
    if section.assumption3 is not None:
        lines.append(_margin_line(f"guard separation ({section.assumption3.samples} samples)", section.assumption3.margins))
    if section.jump_conditions is not None:
        report = section.jump_conditions
        status = "ok" if report.ok else "FAILED"
        lines.append(_margin_line(f"jump conditions [{status}]", report.eig_margins))
        lines.append(f"  gate s(1 + J L^-1 M): {format_number(report.gate)}")
    if section.flow_lmis is not None:
        status = "ok" if section.flow_lmis.ok else "FAILED"
        lines.append(_margin_line(f"flow conditions S0/S1/S2 [{status}]", section.flow_lmis.eig_margins))
    if section.sublevel is not None:
        lines.append(f"  delta1: {format_number(section.sublevel.delta1)}")
        lines.append(f"  vL: {format_number(section.sublevel.vL)}")
        for key, value in section.sublevel.bounds.items():
            lines.append(f"    bound {key}: {format_number(value)}")
    if section.class_k is not None:
        lines.append(f"  alpha1: {format_number(section.class_k.alpha1)} r^2 (nominal {format_number(section.class_k.alpha1_nominal)} r^2)")
        lines.append(f"  alpha2: {format_number(section.class_k.alpha2)} r^2")
    if section.verdict is not None:
        lines.append(f"  verdict: {section.verdict.case.value}")
        if section.verdict.basin_level is not None:
            lines.append(f"  guaranteed sub-level: V <= {format_number(section.verdict.basin_level)}")
    for error in section.errors:
        lines.append(f"  error: {error}")
    return lines


def render_text_report(report: RunReport) -> str:
    lines = [f"Scenario: {report.scenario}", f"Command: {report.command}", ""]
    if report.certificate is not None:
        lines.extend(_certificate_lines(report.certificate))
        lines.append("")
    for simulation in report.simulations:
        lines.append(f"Trajectory {simulation.trajectory}: {simulation.termination.value}, {len(simulation.jumps)} jumps")
        for row in simulation.jumps:
            pre = ", ".join(format_number(v) for v in row.pre)
            post = ", ".join(format_number(v) for v in row.post)
            lines.append(f"  t={format_number(row.t)} j={row.j} {row.component}: ({pre}) -> ({post})")
    if report.monitor is not None:
        m = report.monitor
        lines.append("")
        lines.append("Lyapunov monitor")
        lines.append(f"  samples: {m.samples}, max V: {format_number(m.max_V)}, final V: {format_number(m.final_V)}")
        lines.append(f"  flow violations: {m.flow_violations}, jump violations: {m.jump_violations}")
        lines.append(f"  region transitions: {m.transitions} ({m.unexpected_transitions} unexpected)")
        if m.left_basin:
            lines.append("  left the certified sub-level set")
    if report.files:
        lines.append("")
        lines.append("Files")
        lines.extend(f"  {name}" for name in report.files)
    lines.append("")
    lines.append(f"Exit code: {report.exit_code}")
    return "\n".join(lines) + "\n"


# Atomic writes

async def write_text(path: Path, text: str) -> Path:
    """Write via a temporary sibling file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    try:
        async with aiofiles.open(temp, "w", encoding="utf-8", newline="") as f:
            await f.write(text)
        await aiofiles.os.replace(temp, path)
    except BaseException:
        if temp.exists():
            os.remove(temp)
        raise
    logger.debug("Wrote %s", path)
    return path


async def write_report(report: RunReport, out_dir: Path, stem: str) -> list[Path]:
    """JSON and plain-text renderings side by side."""
    out_dir = Path(out_dir)
    stem = sanitize_filename(stem)
    json_path = await write_text(out_dir / f"{stem}.json", report.model_dump_json(indent=2) + "\n")
    text_path = await write_text(out_dir / f"{stem}.txt", render_text_report(report))
    return [json_path, text_path]
