"""
dualflow-vo Core: Frame Graph

Co-visibility graph over keyframes. Nodes carry pose and inverse depth;
directed edges (i, j) carry the per-edge state of the dual-flow update:
static BA target, confidence logits, dynamic mask, dynamic flow and the
composed optical flow. Masks and flows of edge (i, j) live on frame i's
pixel grid.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..errors import DuplicateFrame, FixedFrameError, InsufficientFrames, NoValidPixels
from .camera import CorrespondenceField, Intrinsics, PixelGrid
from .correlation import FeatureMap
from .dualflow import DynamicMask, FlowField, static_flow
from .se3 import PoseSE3


INIT_FRAMES = 12
INIT_WINDOW = 3
NEIGHBORS = 3
N_FIXED = 2
ADMISSION_BAND = (8.0, 96.0)


@dataclass
class Frame:
    """Keyframe state."""
    id: int
    timestamp: float
    image: Optional[np.ndarray]
    pose: PoseSE3
    inv_depth: np.ndarray
    features: Optional[FeatureMap] = None
    fixed: bool = False


@dataclass
class Edge:
    """Directed co-visibility edge from frame i to frame j."""
    i: int
    j: int
    target: Optional[CorrespondenceField] = None
    confidence_logit: Optional[np.ndarray] = None
    mask: Optional[DynamicMask] = None
    dyn_flow: Optional[FlowField] = None
    optical_flow: Optional[FlowField] = None
    loop: bool = False

    @property
    def key(self) -> Tuple[int, int]:
        return (self.i, self.j)


class FrameGraph:
    """
    Keyframes plus directed co-visibility edges.

    Mutation is single-writer; `snapshot()` hands out an independent copy.
    """

    def __init__(self):
        self.frames: Dict[int, Frame] = {}
        self.edges: Dict[Tuple[int, int], Edge] = {}
        self._adjacency: Dict[int, Set[int]] = {}

    # ----------------------------
    # Construction
    # ----------------------------
    @classmethod
    def from_frames(
        cls,
        frames: Sequence[Frame],
        window: int = INIT_WINDOW,
        n_fixed: int = N_FIXED,
    ) -> FrameGraph:
        """
        Graph over the given frames with edges between frames within `window`
        positions of each other (both directions); the first `n_fixed` frames
        are marked fixed.
        """
        graph = cls()
        for idx, frame in enumerate(frames):
            frame.fixed = idx < n_fixed
            graph.add_frame(frame)
        ids = [frame.id for frame in frames]
        for a in range(len(ids)):
            for b in range(a + 1, min(a + window + 1, len(ids))):
                graph.add_edge(ids[a], ids[b])
                graph.add_edge(ids[b], ids[a])
        return graph

    @classmethod
    def initialize(cls, frames: Sequence[Frame], window: int = INIT_WINDOW) -> FrameGraph:
        """
        Initialization over the first 12 buffered frames.

        Raises:
            InsufficientFrames: if fewer than 12 frames are buffered
        """
        if len(frames) < INIT_FRAMES:
            raise InsufficientFrames(f"need {INIT_FRAMES} frames to initialize, got {len(frames)}")
        return cls.from_frames(list(frames)[:INIT_FRAMES], window=window)

    def add_frame(self, frame: Frame) -> None:
        if frame.id in self.frames:
            raise DuplicateFrame(f"frame {frame.id} already in graph")
        self.frames[frame.id] = frame
        self._adjacency[frame.id] = set()

    def add_edge(self, i: int, j: int, loop: bool = False) -> Optional[Edge]:
        """Add directed edge (i, j); self-edges and duplicates are ignored."""
        if i == j or (i, j) in self.edges:
            return None
        if i not in self.frames or j not in self.frames:
            raise KeyError(f"edge ({i}, {j}) references a missing frame")
        edge = Edge(i=i, j=j, loop=loop)
        self.edges[(i, j)] = edge
        self._adjacency[i].add(j)
        self._adjacency[j].add(i)
        return edge

    def add_keyframe(self, frame: Frame, neighbors: int = NEIGHBORS) -> FrameGraph:
        """
        Insert a keyframe connected both ways to its temporally nearest keyframes.

        Raises:
            DuplicateFrame: if the id is already present
        """
        if frame.id in self.frames:
            raise DuplicateFrame(f"frame {frame.id} already in graph")
        nearest = sorted(
            self.frames.values(),
            key=lambda f: (abs(f.timestamp - frame.timestamp), f.id),
        )[:neighbors]
        frame.fixed = False
        self.add_frame(frame)
        for other in nearest:
            self.add_edge(frame.id, other.id)
            self.add_edge(other.id, frame.id)
        return self

    def add_loop_edge(self, i: int, j: int) -> List[Edge]:
        """Caller-supplied long-range connection, inserted in both directions."""
        added = [self.add_edge(i, j, loop=True), self.add_edge(j, i, loop=True)]
        return [edge for edge in added if edge is not None]

    # ----------------------------
    # Queries
    # ----------------------------
    def sorted_edges(self) -> List[Edge]:
        return [self.edges[key] for key in sorted(self.edges)]

    def outgoing_edges(self, frame_id: int) -> List[Edge]:
        return [edge for edge in self.sorted_edges() if edge.i == frame_id]

    def neighbors(self, frame_id: int) -> Set[int]:
        return set(self._adjacency.get(frame_id, set()))

    def frame_ids(self) -> List[int]:
        return sorted(self.frames)

    def fixed_ids(self) -> List[int]:
        return [fid for fid in self.frame_ids() if self.frames[fid].fixed]

    def free_ids(self) -> List[int]:
        return [fid for fid in self.frame_ids() if not self.frames[fid].fixed]

    def is_consistent(self) -> bool:
        """Every edge endpoint exists and the adjacency index matches the edge list."""
        expected: Dict[int, Set[int]] = {fid: set() for fid in self.frames}
        for i, j in self.edges:
            if i not in self.frames or j not in self.frames or i == j:
                return False
            expected[i].add(j)
            expected[j].add(i)
        return expected == self._adjacency

    # ----------------------------
    # Mutation of state variables
    # ----------------------------
    def set_pose(self, frame_id: int, pose: PoseSE3) -> None:
        """
        Raises:
            FixedFrameError: if the frame is gauge-fixed
        """
        frame = self.frames[frame_id]
        if frame.fixed:
            raise FixedFrameError(f"frame {frame_id} is fixed")
        frame.pose = pose

    def set_inv_depth(self, frame_id: int, inv_depth: np.ndarray) -> None:
        self.frames[frame_id].inv_depth = inv_depth

    def snapshot(self) -> FrameGraph:
        return copy.deepcopy(self)

    # ----------------------------
    # Debug dump
    # ----------------------------
    def dump(self) -> str:
        """Line-oriented text: NODE id timestamp fixed / EDGE i j."""
        lines = []
        for fid in self.frame_ids():
            frame = self.frames[fid]
            lines.append(f"NODE {fid} {frame.timestamp:.9f} {int(frame.fixed)}")
        for edge in self.sorted_edges():
            lines.append(f"EDGE {edge.i} {edge.j}")
        return "\n".join(lines) + "\n"

    def save_dump(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")


def mean_flow_distance(graph: FrameGraph, intr: Intrinsics, i: int, j: int) -> float:
    """
    Mean static-flow magnitude from frame i to frame j over valid pixels.

    Raises:
        NoValidPixels: if no pixel reprojects validly
    """
    fi, fj = graph.frames[i], graph.frames[j]
    grid = PixelGrid.for_shape(*fi.inv_depth.shape)
    flow = static_flow(intr, fi.pose, fj.pose, fi.inv_depth, grid)
    if not flow.valid.any():
        raise NoValidPixels(f"no valid pixels between frames {i} and {j}")
    return float(flow.magnitude()[flow.valid].mean())


def admits_keyframe(distance: float, band: Tuple[float, float] = ADMISSION_BAND) -> bool:
    """Keyframe admission: mean flow inside [8, 96] pixels by default."""
    return band[0] <= distance <= band[1]


def frames_from_arrays(
    images: Iterable[Optional[np.ndarray]],
    poses: Iterable[PoseSE3],
    inv_depths: Iterable[np.ndarray],
    timestamps: Iterable[float],
) -> List[Frame]:
    """Build Frame objects with ids 0..n-1."""
    return [
        Frame(id=idx, timestamp=float(ts), image=img, pose=pose, inv_depth=np.array(d, dtype=np.float64))
        for idx, (img, pose, d, ts) in enumerate(zip(images, poses, inv_depths, timestamps))
    ]
