"""
dualflow-vo - dual-flow dynamic visual odometry backend

Splits optical flow between keyframes into a camera-induced static flow and
an object-induced dynamic flow, keeps a per-pixel dynamic mask, and feeds
only static correspondences into dense bundle adjustment over poses and
inverse depths. Ships a synthetic scene oracle and ATE evaluation.
"""

__version__ = "1.0.0"

from .config import RunConfig, LossConfig, load_config, load_sim_config
from .core import (
    FrameGraph,
    Frame,
    Edge,
    FlowField,
    DynamicMask,
    PoseSE3,
    Twist,
    Intrinsics,
    SolverState,
    RunResult,
    iterate_once,
    run,
)
from .errors import DualFlowError

__all__ = [
    "RunConfig",
    "LossConfig",
    "load_config",
    "load_sim_config",
    "FrameGraph",
    "Frame",
    "Edge",
    "FlowField",
    "DynamicMask",
    "PoseSE3",
    "Twist",
    "Intrinsics",
    "SolverState",
    "RunResult",
    "iterate_once",
    "run",
    "DualFlowError",
]
