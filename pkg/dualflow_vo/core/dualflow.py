"""
dualflow-vo Core: Dual-Flow Representation

Static flow (camera-induced), dynamic flow (object-induced) and optical flow
fields, dynamic masks with the convention 0 = dynamic / 1 = static, the
artificial mask label, per-frame mask aggregation, and bilinear warping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, NoIncidentEdges, ShapeMismatch
from .camera import CorrespondenceField, Intrinsics, PixelGrid, reproject
from .se3 import PoseSE3, relative


MASK_THRESHOLD = 0.5
DEFAULT_MU = 0.5


@dataclass
class FlowField:
    """Per-pixel displacement (du, dv) in pixels with validity flags."""
    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        return cls(
            du=np.zeros((height, width)),
            dv=np.zeros((height, width)),
            valid=np.ones((height, width), dtype=bool),
        )

    @classmethod
    def from_array(cls, flow: np.ndarray, valid: np.ndarray | None = None) -> FlowField:
        """Build from an (H, W, 2) array."""
        if valid is None:
            valid = np.isfinite(flow).all(axis=-1)
        return cls(du=np.array(flow[..., 0], dtype=np.float64), dv=np.array(flow[..., 1], dtype=np.float64), valid=valid)

    @classmethod
    def between(cls, corr: CorrespondenceField, grid: PixelGrid) -> FlowField:
        """Displacement from the grid to a correspondence field."""
        delta = corr.coords - grid.coords
        return cls(du=delta[..., 0], dv=delta[..., 1], valid=corr.valid.copy())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.du.shape

    def as_array(self) -> np.ndarray:
        return np.stack([self.du, self.dv], axis=-1)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.du, self.dv)

    def target_coords(self, grid: PixelGrid) -> CorrespondenceField:
        """p + F for every pixel."""
        return CorrespondenceField(coords=grid.coords + self.as_array(), valid=self.valid.copy())


@dataclass
class DynamicMask:
    """Per-pixel mask in [0, 1]; 0 = dynamic, 1 = static."""
    values: np.ndarray

    @classmethod
    def static(cls, height: int, width: int) -> DynamicMask:
        return cls(values=np.ones((height, width)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def binarized(self) -> np.ndarray:
        """Boolean static indicator (value >= 0.5)."""
        return self.values >= MASK_THRESHOLD

    def dynamic(self) -> np.ndarray:
        return ~self.binarized()


@dataclass
class AggregatedMask:
    """Binary per-frame mask gathered over all outgoing edges; 1 = static."""
    values: np.ndarray

    @property
    def count(self) -> int:
        """N': pixels whose aggregated value is 1."""
        return int(self.values.sum())


def _same_shape(a: FlowField, b: FlowField) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"flow shapes differ: {a.shape} vs {b.shape}")


def compose_flow(f_s: FlowField, f_d: FlowField) -> FlowField:
    """F_o = F_s + F_d; valid where both are valid."""
    _same_shape(f_s, f_d)
    return FlowField(du=f_s.du + f_d.du, dv=f_s.dv + f_d.dv, valid=f_s.valid & f_d.valid)


def dynamic_residual(f_o: FlowField, f_s: FlowField) -> FlowField:
    """F_d = F_o - F_s."""
    _same_shape(f_o, f_s)
    return FlowField(du=f_o.du - f_s.du, dv=f_o.dv - f_s.dv, valid=f_o.valid & f_s.valid)


def static_flow(
    intr: Intrinsics,
    g_i: PoseSE3,
    g_j: PoseSE3,
    d_i: np.ndarray,
    grid: PixelGrid,
) -> FlowField:
    """Camera-induced flow p_ij - p_i from two poses and the source inverse depth."""
    corr = reproject(intr, relative(g_i, g_j), d_i, grid)
    return FlowField.between(corr, grid)


def artificial_mask(
    intr: Intrinsics,
    g_ij: PoseSE3,
    d_i: np.ndarray,
    f_o: FlowField,
    grid: PixelGrid,
    mu: float = DEFAULT_MU,
) -> DynamicMask:
    """
    Self-supervised mask label [||p_cam - p_flow|| <= mu].

    Args:
        intr: Camera intrinsics
        g_ij: Relative pose from frame i to frame j
        d_i: Inverse depth of frame i
        f_o: Optical flow from frame i to frame j
        grid: Pixel grid of frame i
        mu: Threshold in pixels

    Returns:
        DynamicMask with 1 (static) where the geometric and flow targets agree
    """
    if not mu > 0:
        raise ConfigError("mu must be positive")
    p_cam = reproject(intr, g_ij, d_i, grid).coords
    p_flow = grid.coords + f_o.as_array()
    diff = p_cam - p_flow
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    with np.errstate(invalid="ignore"):
        static = dist <= mu
    return DynamicMask(values=static.astype(np.float64))


def mask_agg(graph, frame_id: int) -> AggregatedMask:
    """
    Aggregate the masks of every edge leaving frame_id (masks live on the
    source frame's pixel grid) by pixelwise minimum after binarization.

    Raises:
        NoIncidentEdges: if no outgoing edge carries a mask
    """
    masks = [edge.mask for edge in graph.outgoing_edges(frame_id) if edge.mask is not None]
    if not masks:
        raise NoIncidentEdges(f"frame {frame_id} has no edge with a mask")
    agg = np.ones(masks[0].shape, dtype=bool)
    for mask in masks:
        agg &= mask.binarized()
    return AggregatedMask(values=agg.astype(np.float64))


def warp_image(img_j: np.ndarray, corr: CorrespondenceField) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear sample of img_j at corr coordinates.

    A pixel is invalid when any tap it needs falls outside the image; invalid
    pixels read 0.
    """
    height, width = img_j.shape[:2]
    u = corr.coords[..., 0]
    v = corr.coords[..., 1]
    with np.errstate(invalid="ignore"):
        valid = corr.valid & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)

    def _sample(channel: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(channel, [vv, uu], order=1, mode="nearest")

    if img_j.ndim == 2:
        out = _sample(img_j)
    else:
        out = np.stack([_sample(img_j[..., c]) for c in range(img_j.shape[2])], axis=-1)
        valid_b = valid[..., None]
        return np.where(valid_b, out, 0.0), valid
    return np.where(valid, out, 0.0), valid


def segment_motion(f_d: FlowField, mu: float = DEFAULT_MU) -> DynamicMask:
    """Motion segmentation: pixels with ||F_d|| > mu are dynamic; invalid pixels stay static."""
    with np.errstate(invalid="ignore"):
        dynamic = f_d.valid & (f_d.magnitude() > mu)
    return DynamicMask(values=(~dynamic).astype(np.float64))


@dataclass
class Decomposition:
    """Static/dynamic split of one optical-flow field."""
    static: FlowField
    dynamic: FlowField
    mask: DynamicMask


def decompose(
    intr: Intrinsics,
    g_i: PoseSE3,
    g_j: PoseSE3,
    d_i: np.ndarray,
    f_o: FlowField,
    mu: float = DEFAULT_MU,
) -> Decomposition:
    """
    Split F_o into camera-induced and object-induced parts and threshold the latter.

    Raises:
        ShapeMismatch: if the flow and depth sizes differ
    """
    if f_o.shape != d_i.shape:
        raise ShapeMismatch(f"flow {f_o.shape} does not match inverse depth {d_i.shape}")
    grid = PixelGrid.for_shape(*d_i.shape)
    f_s = static_flow(intr, g_i, g_j, d_i, grid)
    f_d = dynamic_residual(f_o, f_s)
    return Decomposition(static=f_s, dynamic=f_d, mask=segment_motion(f_d, mu))
