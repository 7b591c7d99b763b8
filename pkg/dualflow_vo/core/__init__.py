"""
dualflow-vo Core

Geometry, dual-flow representation, correlation, frame graph, dense bundle
adjustment, the dynamic update loop and the photometric loss suite.
"""

from .se3 import PoseSE3, Twist, exp, log, retract, relative
from .camera import Intrinsics, PixelGrid, CorrespondenceField, reproject, reproject_jacobians
from .dualflow import FlowField, DynamicMask, AggregatedMask, compose_flow, decompose, mask_agg
from .framegraph import Frame, Edge, FrameGraph
from .dba import BAProblem, solve
from .update_loop import SolverState, RunResult, iterate_once, run

__all__ = [
    "PoseSE3",
    "Twist",
    "exp",
    "log",
    "retract",
    "relative",
    "Intrinsics",
    "PixelGrid",
    "CorrespondenceField",
    "reproject",
    "reproject_jacobians",
    "FlowField",
    "DynamicMask",
    "AggregatedMask",
    "compose_flow",
    "decompose",
    "mask_agg",
    "Frame",
    "Edge",
    "FrameGraph",
    "BAProblem",
    "solve",
    "SolverState",
    "RunResult",
    "iterate_once",
    "run",
]
