"""
dualflow-vo Errors

Exception hierarchy shared by every module. Each class carries the process
exit code the CLI reports for it (1 I/O, 2 config/parse, 3 numerical).
"""

from __future__ import annotations

from typing import Any, Optional


EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class DualFlowError(Exception):
    """Base class for all dualflow-vo errors."""

    exit_code: int = EXIT_NUMERICAL
    # Partial result attached by long-running operations before re-raising.
    partial: Optional[Any] = None


# ----------------------------
# Geometry
# ----------------------------
class AngleNearPi(DualFlowError):
    """Rotation angle too close to pi for an unambiguous logarithm."""


class NonPositiveInverseDepth(DualFlowError):
    """Inverse depth must be strictly positive."""


class ShapeMismatch(DualFlowError):
    """Array shapes that must agree do not."""

    exit_code = EXIT_CONFIG


# ----------------------------
# Frame graph
# ----------------------------
class NoIncidentEdges(DualFlowError):
    """Frame has no incident edge carrying a mask."""


class InsufficientFrames(DualFlowError):
    """Not enough frames buffered to initialize the graph."""


class DuplicateFrame(DualFlowError):
    """Frame id already present in the graph."""


class NoValidPixels(DualFlowError):
    """No pixel survived projection validity checks."""


class FixedFrameError(DualFlowError):
    """Attempt to modify the pose of a gauge-fixed frame."""


# ----------------------------
# Solver
# ----------------------------
class SingularSystem(DualFlowError):
    """Reduced pose system is not positive definite after damping."""


class Diverged(DualFlowError):
    """Cost kept increasing over consecutive accepted steps."""


class MissingGroundTruth(DualFlowError):
    """Oracle provider used without simulator ground truth."""

    exit_code = EXIT_CONFIG


# ----------------------------
# Simulation / evaluation / IO
# ----------------------------
class DegenerateConfig(DualFlowError):
    """Simulator configuration cannot produce a valid scene."""

    exit_code = EXIT_CONFIG


class TooFewCorrespondences(DualFlowError):
    """Fewer than three associated pose pairs."""

    exit_code = EXIT_CONFIG


class DegenerateGeometry(DualFlowError):
    """Associated positions are collinear or coincident."""


class EmptyInput(DualFlowError):
    """An operation that needs at least one entry received none."""

    exit_code = EXIT_CONFIG


class ParseError(DualFlowError):
    """Malformed input file."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        location = ""
        if path is not None:
            location += f"{path}"
        if line_number is not None:
            location += f":{line_number}"
        super().__init__(f"{location}: {message}" if location else message)
        self.line_number = line_number
        self.path = path


class ConfigError(DualFlowError):
    """Invalid JSON config document."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column
