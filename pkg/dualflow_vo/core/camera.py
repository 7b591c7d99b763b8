"""
dualflow-vo Core: Pinhole Camera

Projection, inverse projection, dense reprojection between frames and the
analytic Jacobians of reprojection with respect to a left twist perturbation
of the relative pose and the source inverse depth.

Integer pixel coordinates are pixel centers. Inverse depth is used
throughout; reprojection works on the homogeneous point R x + t d, which is
the metric point scaled by d.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..errors import ConfigError, NonPositiveInverseDepth, ShapeMismatch
from .se3 import PoseSE3


Z_MIN = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 60.0) -> Intrinsics:
        """Square pixels, principal point at the image center."""
        f = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class PixelGrid:
    """Canonical pixel grid; coords[v, u] == (u, v)."""
    coords: np.ndarray

    @classmethod
    def for_shape(cls, height: int, width: int) -> PixelGrid:
        v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
        return cls(coords=np.stack([u, v], axis=-1))

    @classmethod
    def for_intrinsics(cls, intr: Intrinsics) -> PixelGrid:
        return cls.for_shape(intr.height, intr.width)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.coords.shape[:2]


@dataclass
class CorrespondenceField:
    """Dense pixel coordinates in a target frame, with validity flags."""
    coords: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.coords.shape[:2]


def in_bounds(intr: Intrinsics, uv: np.ndarray) -> np.ndarray:
    u, v = uv[..., 0], uv[..., 1]
    return (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)


def unproject(intr: Intrinsics, p: np.ndarray, d: float) -> np.ndarray:
    """
    Back-project a pixel with inverse depth d to a camera-frame 3D point.

    Raises:
        NonPositiveInverseDepth: if d <= 0
    """
    if not d > 0:
        raise NonPositiveInverseDepth(f"inverse depth {d} is not positive")
    u, v = float(p[0]), float(p[1])
    ray = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return ray / d


def project(intr: Intrinsics, X: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Project a camera-frame point; validity needs Z > z_min and in-bounds pixel."""
    X = np.asarray(X, dtype=np.float64)
    Z = X[2]
    if Z <= Z_MIN:
        return np.array([np.nan, np.nan]), False
    uv = np.array([intr.fx * X[0] / Z + intr.cx, intr.fy * X[1] / Z + intr.cy])
    return uv, bool(in_bounds(intr, uv))


def _rays(intr: Intrinsics, grid: PixelGrid) -> np.ndarray:
    c = grid.coords
    return np.stack([
        (c[..., 0] - intr.cx) / intr.fx,
        (c[..., 1] - intr.cy) / intr.fy,
        np.ones(c.shape[:2]),
    ], axis=-1)


def _check_shapes(d_i: np.ndarray, grid: PixelGrid) -> None:
    if d_i.shape != grid.shape:
        raise ShapeMismatch(f"inverse depth {d_i.shape} does not match grid {grid.shape}")


def _homogeneous_points(intr: Intrinsics, g_ij: PoseSE3, d_i: np.ndarray, grid: PixelGrid) -> np.ndarray:
    """R x + t d: the target-frame point scaled by the source inverse depth."""
    rays = _rays(intr, grid)
    return rays @ g_ij.R.T + d_i[..., None] * g_ij.translation


def _project_homogeneous(intr: Intrinsics, Xh: np.ndarray, d_i: np.ndarray) -> CorrespondenceField:
    Z = Xh[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        coords = np.stack([
            intr.fx * Xh[..., 0] / Z + intr.cx,
            intr.fy * Xh[..., 1] / Z + intr.cy,
        ], axis=-1)
        # metric depth in the target frame is Z / d
        front = (d_i > 0) & (Z > Z_MIN * d_i)
    valid = front & np.isfinite(coords).all(axis=-1) & in_bounds(intr, coords)
    return CorrespondenceField(coords=coords, valid=valid)


def reproject(intr: Intrinsics, g_ij: PoseSE3, d_i: np.ndarray, grid: PixelGrid) -> CorrespondenceField:
    """
    Dense correspondence p_ij = pi(G_ij o pi^-1(p_i, d_i)).

    Args:
        intr: Camera intrinsics
        g_ij: Relative pose taking camera-i points to camera j
        d_i: Source inverse depth map (H, W)
        grid: Source pixel grid

    Returns:
        CorrespondenceField in frame j

    Raises:
        ShapeMismatch: if the grid and depth sizes differ
    """
    _check_shapes(d_i, grid)
    Xh = _homogeneous_points(intr, g_ij, d_i, grid)
    return _project_homogeneous(intr, Xh, d_i)


def reproject_jacobians(
    intr: Intrinsics,
    g_ij: PoseSE3,
    d_i: np.ndarray,
    grid: PixelGrid,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of p_ij w.r.t. a left twist on g_ij and w.r.t. d_i.

    Returns:
        (J_pose of shape (H, W, 2, 6), J_depth of shape (H, W, 2, 1))
    """
    _check_shapes(d_i, grid)
    Xh = _homogeneous_points(intr, g_ij, d_i, grid)
    X, Y, Z = Xh[..., 0], Xh[..., 1], Xh[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = 1.0 / Z
        # d(pi)/d(Xh), shape (H, W, 2, 3)
        dpi = np.zeros(Xh.shape[:2] + (2, 3))
        dpi[..., 0, 0] = intr.fx * inv_z
        dpi[..., 0, 2] = -intr.fx * X * inv_z * inv_z
        dpi[..., 1, 1] = intr.fy * inv_z
        dpi[..., 1, 2] = -intr.fy * Y * inv_z * inv_z

    # d(Xh)/d(omega) = -[Xh]x ; d(Xh)/d(v) = d I
    dX = np.zeros(Xh.shape[:2] + (3, 6))
    dX[..., 0, 1] = Z
    dX[..., 0, 2] = -Y
    dX[..., 1, 0] = -Z
    dX[..., 1, 2] = X
    dX[..., 2, 0] = Y
    dX[..., 2, 1] = -X
    dX[..., 0, 3] = d_i
    dX[..., 1, 4] = d_i
    dX[..., 2, 5] = d_i

    J_pose = np.einsum("...ij,...jk->...ik", dpi, dX)
    J_depth = np.einsum("...ij,j->...i", dpi, g_ij.translation)[..., None]
    return J_pose, J_depth
