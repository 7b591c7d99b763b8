"""
dualflow-vo CLI UX - Rich-based UI components

Panels for run summaries, tables for check results, and a stderr console
for error messages. Machine-readable output (the eval CSV line) bypasses
these and goes straight to stdout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text


@dataclass
class RichPanel:
    """Wrapper for Rich Panel with consistent styling."""

    title: str
    content: List[str]
    border_style: str = "bright_cyan"
    title_style: str = "bold white"

    def render(self) -> Panel:
        return Panel(
            "\n".join(self.content),
            title=Text(self.title, style=self.title_style),
            border_style=self.border_style,
            box=box.ROUNDED,
        )

    def print(self, console: Optional[Console] = None):
        (console or get_console()).print(self.render())


@dataclass
class RichTable:
    """Wrapper for Rich Table."""

    title: str
    columns: List[str]
    rows: List[List[str]]
    show_header: bool = True

    def render(self) -> Table:
        table = Table(title=self.title, show_header=self.show_header, box=box.ROUNDED)
        for col in self.columns:
            table.add_column(col, style="cyan")
        for row in self.rows:
            table.add_row(*[str(cell) for cell in row])
        return table

    def print(self, console: Optional[Console] = None):
        (console or get_console()).print(self.render())


def get_console() -> Console:
    """Console for human-readable output on stdout."""
    return Console(highlight=False)


def get_error_console() -> Console:
    """Console writing to standard error."""
    return Console(stderr=True, highlight=False)


def print_error(message: str, exit_code: int) -> None:
    """One-line error report on stderr."""
    get_error_console().print(Text(f"error (exit {exit_code}): {message}", style="bold red"))


def format_metrics(metrics: Dict[str, Any]) -> List[str]:
    """Sorted 'key: value' lines; floats in compact scientific form."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            lines.append(f"{key}: {value:.6g}")
        else:
            lines.append(f"{key}: {value}")
    return lines


def summary_panel(title: str, metrics: Dict[str, Any], ok: bool = True) -> RichPanel:
    return RichPanel(
        title=title,
        content=format_metrics(metrics),
        border_style="bright_green" if ok else "bright_red",
    )


def checks_table(results: Sequence[Any]) -> RichTable:
    """Table of gradient-check results (objects with name, max_rel_error, passed)."""
    rows = [
        [r.name, f"{r.max_rel_error:.3e}", "PASS" if r.passed else "FAIL"]
        for r in results
    ]
    return RichTable(title="Gradient checks", columns=["check", "max_rel_error", "status"], rows=rows)
