import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from app.config import PROGRESS_STEPS
from app.models.schemas import RunStatus

logger = logging.getLogger(__name__)


@dataclass
class Run:
    """One command or figure job."""
    run_id: str
    status: RunStatus = RunStatus.QUEUED
    progress: int = 0
    message: str = "Queued"
    error: Optional[str] = None
    files: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.monotonic)

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self.started


class ProgressService:
    """Tracks running commands and logs their progress."""

    def __init__(self):
        self._runs: dict[str, Run] = {}

    def create_run(self, run_id: str) -> Run:
        run = Run(run_id=run_id)
        self._runs[run_id] = run
        return run

    def get_run(self, run_id: str) -> Optional[Run]:
        return self._runs.get(run_id)

    def update_progress(self, run_id: str, status: RunStatus, message: str, sub_progress: float = 0):
        """Move the run to a new stage; progress is placed inside that stage's range."""
        run = self._runs.get(run_id)
        if not run:
            return

        run.status = status
        run.message = message

        if status.value in PROGRESS_STEPS:
            start, end = PROGRESS_STEPS[status.value]
            run.progress = int(start + (end - start) * sub_progress)
        else:
            run.progress = 0

        logger.info("[%s] %3d%% %s", run_id, run.progress, message)

    def set_error(self, run_id: str, error: str):
        run = self._runs.get(run_id)
        if not run:
            return

        run.status = RunStatus.FAILED
        run.error = error
        run.message = f"Error: {error}"
        logger.error("[%s] failed after %.2fs: %s", run_id, run.elapsed, error)

    def set_completed(self, run_id: str, files: list[str]):
        run = self._runs.get(run_id)
        if not run:
            return

        run.status = RunStatus.COMPLETED
        run.progress = 100
        run.files = list(files)
        run.message = f"Completed ({len(files)} files)"
        logger.info("[%s] %s in %.2fs", run_id, run.message, run.elapsed)

    def cleanup_run(self, run_id: str):
        self._runs.pop(run_id, None)


# Global progress service instance
progress_service = ProgressService()
