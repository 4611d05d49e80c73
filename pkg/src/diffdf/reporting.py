from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Callable

logger = logging.getLogger("diffdf.reporting")


class ReportAdapter:
    """Step/note reporter whose timings and artifacts end up in ``run.json``."""

    def __init__(self) -> None:
        self._event_callback: Callable[[str, str, datetime], None] | None = None
        self._timings: dict[str, float] = {}
        self._artifacts: list[dict[str, str]] = []
        self._notes: list[str] = []

    def set_event_callback(
        self, fn: Callable[[str, str, datetime], None] | None
    ) -> None:
        """Register a callback invoked on step enter/exit with (detail, timestamp).

        Pass ``None`` to disable (fall back to logging).
        """
        self._event_callback = fn

    def _emit(self, kind: str, detail: str) -> None:
        cb = self._event_callback
        if cb is not None:
            cb(kind, detail, datetime.now())

    @contextmanager
    def step(self, title: str):
        self._emit("step", f"{title} - start")
        logger.info("STEP[start]: %s", title)
        started = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - started
            self._timings[title] = self._timings.get(title, 0.0) + elapsed
            self._emit("step", f"{title} - end")
            logger.info("STEP[end]: %s (%.2fs)", title, elapsed)

    def note(self, message: str) -> None:
        self._emit("note", message)
        self._notes.append(message)
        logger.info(message)

    def attach_file(self, path: Path, name: str) -> None:
        self._artifacts.append({"name": name, "path": str(path)})
        logger.info("ATTACH_FILE[%s] %s", name, path)

    def snapshot(self) -> dict[str, Any]:
        """Timings, artifacts and notes collected since the last reset."""
        return {
            "timings": dict(self._timings),
            "artifacts": list(self._artifacts),
            "notes": list(self._notes),
        }

    def reset(self) -> None:
        self._timings.clear()
        self._artifacts.clear()
        self._notes.clear()


report = ReportAdapter()
