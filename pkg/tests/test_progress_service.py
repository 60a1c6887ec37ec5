import logging

from app.models.schemas import RunStatus
from app.services.progress_service import ProgressService


def test_progress_follows_the_stage_ranges(caplog):
    service = ProgressService()
    service.create_run("run-1")

    with caplog.at_level(logging.INFO, logger="app.services.progress_service"):
        service.update_progress("run-1", RunStatus.SIMULATING, "Simulating...", sub_progress=0.5)
    run = service.get_run("run-1")
    assert run.status == RunStatus.SIMULATING
    assert run.progress == 45
    assert "[run-1]  45% Simulating..." in caplog.text

    service.set_completed("run-1", ["a.csv", "b.csv"])
    assert run.progress == 100
    assert run.message == "Completed (2 files)"
    assert run.files == ["a.csv", "b.csv"]

    service.cleanup_run("run-1")
    assert service.get_run("run-1") is None


def test_errors_mark_the_run_failed(caplog):
    service = ProgressService()
    service.create_run("run-2")
    with caplog.at_level(logging.ERROR, logger="app.services.progress_service"):
        service.set_error("run-2", "bad config")
    run = service.get_run("run-2")
    assert run.status == RunStatus.FAILED
    assert run.message == "Error: bad config"
    assert "bad config" in caplog.text


def test_unknown_runs_are_ignored():
    service = ProgressService()
    service.update_progress("missing", RunStatus.LOADING, "Loading...")
    service.set_completed("missing", [])
    service.cleanup_run("missing")
    assert service.get_run("missing") is None
