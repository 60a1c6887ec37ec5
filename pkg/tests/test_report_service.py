import asyncio

import numpy as np

from app.models.schemas import RunReport
from app.services.combined_service import simulate_combined
from app.services.hybrid_service import simulate
from app.services.report_service import (
    arc_csv,
    combined_csv,
    format_number,
    render_text_report,
    sanitize_filename,
    simulation_summary,
    write_report,
    write_text,
)


def test_sanitize_filename():
    assert sanitize_filename("ball run/1") == "ball_run_1"
    assert sanitize_filename("...") == "scenario"


def test_numbers_round_trip_exactly():
    for value in (0.1, 1 / 3, 9.81, -2.5e-17):
        assert float(format_number(value)) == value
    assert format_number(10.0) == "10"


class TestCsv:
    def test_arc_columns_and_jump_rows(self, ball_reference):
        lines = arc_csv(ball_reference).splitlines()
        assert lines[0] == "t,j,x1,x2"
        t, j, _ = ball_reference.samples()
        assert len(lines) == t.size + 1
        first_jump = int(np.flatnonzero(np.diff(j) == 1)[0]) + 1
        before, after = lines[first_jump].split(","), lines[first_jump + 1].split(",")
        assert before[0] == after[0]
        assert (before[1], after[1]) == ("0", "1")

    def test_zero_horizon_has_one_row(self, ball):
        arc = simulate(ball.system, [0.0, 10.0], 0.0, 0.0)
        assert arc_csv(arc) == "t,j,x1,x2\n0,0,0,10\n"

    def test_combined_columns(self, ball):
        combined = simulate_combined(ball.system, [0.0, 10.0], [0.0, 3.0], 0.0, 1.0)
        lines = combined_csv(combined).splitlines()
        assert lines[0] == "t,j,jx,jy,x1,x2,y1,y2"
        jumps = [line.split(",") for line in lines[1:]]
        assert max(int(row[3]) for row in jumps) == 1
        assert all(row[2] == "0" for row in jumps)


class TestWriting:
    def test_atomic_write_leaves_no_temporary_files(self, tmp_path):
        path = asyncio.run(write_text(tmp_path / "out" / "a.csv", "t,j\n0,0\n"))
        assert path.read_text() == "t,j\n0,0\n"
        assert [p.name for p in path.parent.iterdir()] == ["a.csv"]

    def test_overwrite(self, tmp_path):
        asyncio.run(write_text(tmp_path / "a.txt", "old"))
        asyncio.run(write_text(tmp_path / "a.txt", "new"))
        assert (tmp_path / "a.txt").read_text() == "new"

    def test_report_json_and_text(self, tmp_path, ball_reference):
        report = RunReport(
            scenario="bouncing_ball",
            command="simulate",
            simulations=[simulation_summary("reference", ball_reference, file="ref.csv")],
        )
        json_path, text_path = asyncio.run(write_report(report, tmp_path, "bouncing_ball simulate"))
        assert json_path.name == "bouncing_ball_simulate.json"
        assert RunReport.model_validate_json(json_path.read_text()) == report
        text = text_path.read_text()
        assert text == render_text_report(report)
        assert "Trajectory reference: HorizonReached, 7 jumps" in text
        assert text.endswith("Exit code: 0\n")
