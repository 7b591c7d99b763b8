"""
Solver Logging

Record solver events (outer iterations, DBA steps, rejected steps, empty
loss masks, alignment fallbacks) for audit and analysis.

Entries are keyed by iteration index rather than wall-clock time so that
reruns with the same seed produce identical log files.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional
import json


@dataclass
class SolverLogEntry:
    """Log entry for one solver event."""
    event: str
    iteration: int
    values: Dict[str, Any]
    message: Optional[str] = None


class SolverLogger:
    """
    Logger for solver events.
    """

    def __init__(self, log_file: Optional[Path] = None, max_logs: int = 1000):
        """
        Initialize solver logger.

        Args:
            log_file: Optional file path to append JSON lines to (defaults to in-memory only)
            max_logs: Number of entries kept in memory
        """
        self.log_file = log_file
        self.logs: List[SolverLogEntry] = []
        self.max_logs = max_logs

    def log_event(
        self,
        event: str,
        iteration: int = -1,
        message: Optional[str] = None,
        **values: Any,
    ) -> SolverLogEntry:
        """
        Log a solver event.

        Args:
            event: Event name (outer_iteration, dba_step, step_rejected, ...)
            iteration: Outer iteration index, -1 when not tied to one
            message: Optional human-readable note
            **values: Numeric payload
        """
        entry = SolverLogEntry(
            event=event,
            iteration=iteration,
            values={key: _plain(value) for key, value in values.items()},
            message=message,
        )
        self.logs.append(entry)

        if len(self.logs) > self.max_logs:
            self.logs = self.logs[-self.max_logs:]

        if self.log_file:
            self._write_to_file(entry)
        return entry

    def _write_to_file(self, entry: SolverLogEntry) -> None:
        """Append entry as one JSON line."""
        if not self.log_file:
            return
        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(asdict(entry), sort_keys=True) + "\n")

    def get_recent_logs(self, limit: int = 100) -> List[SolverLogEntry]:
        return self.logs[-limit:]

    def get_logs_by_event(self, event: str) -> List[SolverLogEntry]:
        """Get all logs for a specific event name."""
        return [log for log in self.logs if log.event == event]

    def clear(self) -> None:
        self.logs = []

    def export(self, path: Path) -> None:
        """Write the in-memory entries to path as JSON lines, replacing it."""
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(asdict(entry), sort_keys=True) for entry in self.logs]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _plain(value: Any) -> Any:
    """Convert numpy scalars to built-ins for JSON output."""
    if hasattr(value, "item") and callable(value.item):
        try:
            return value.item()
        except (TypeError, ValueError):
            return str(value)
    return value


# Global logger instance
_global_logger = SolverLogger()


def get_solver_logger() -> SolverLogger:
    """Get the global solver logger instance."""
    return _global_logger
