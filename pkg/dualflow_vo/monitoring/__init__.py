"""
Solver Monitoring

Event logging for the solver and segmentation metrics for dynamic masks.
"""

from .logging import SolverLogger, SolverLogEntry, get_solver_logger
from .metrics import MetricsCollector, SegmentationMetrics, segmentation_metrics

__all__ = [
    "SolverLogger",
    "SolverLogEntry",
    "get_solver_logger",
    "MetricsCollector",
    "SegmentationMetrics",
    "segmentation_metrics",
]
