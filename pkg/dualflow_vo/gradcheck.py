"""
dualflow-vo Gradient Checks

Central finite-difference verification of every analytic derivative the
solver and the loss suite rely on: reprojection Jacobians, the DBA cost
gradient, and the SSIM / flow photometric / mask cross-entropy gradients.

Each check draws random instances from a seeded generator and reports the
worst relative error ||analytic - numeric||_inf / ||numeric||_inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .core.camera import CorrespondenceField, Intrinsics, PixelGrid, reproject, reproject_jacobians
from .core.dba import BAProblem, cost_gradient, residuals, total_cost
from .core.dualflow import DynamicMask, FlowField, warp_image
from .core.framegraph import Frame, FrameGraph
from .core.photometric import flow_photo_grad, mask_ce_grad, mask_ce_loss, ssim, ssim_grad
from .core.se3 import PoseSE3, Twist, exp, random_twist, relative, retract


EPS = 1e-6
REL_TOL = 1e-5
DEFAULT_INSTANCES = 5
BROKEN_JACOBIAN_SCALE = 1.0 + 1e-3


@dataclass
class CheckResult:
    """Outcome of one finite-difference check."""
    name: str
    max_rel_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale if numeric.size else 0.0


def _unit_twist(k: int, eps: float) -> Twist:
    xi = np.zeros(6)
    xi[k] = eps
    return Twist.from_vector(xi)


# ----------------------------
# Camera
# ----------------------------
def _camera_instance(rng: np.random.Generator):
    height, width = 12, 16
    f = rng.uniform(30.0, 60.0)
    intr = Intrinsics(fx=f, fy=f * rng.uniform(0.9, 1.1), cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)
    g_ij = exp(random_twist(rng, rng.uniform(0.02, 0.15)))
    d_i = rng.uniform(0.2, 1.0, size=(height, width))
    return intr, g_ij, d_i, PixelGrid.for_shape(height, width)


def check_camera_pose_jacobian(rng: np.random.Generator, scale: float = 1.0) -> float:
    intr, g_ij, d_i, grid = _camera_instance(rng)
    J_pose, _ = reproject_jacobians(intr, g_ij, d_i, grid)
    J_pose = J_pose * scale
    valid = reproject(intr, g_ij, d_i, grid).valid
    numeric = np.zeros_like(J_pose)
    for k in range(6):
        plus = reproject(intr, exp(_unit_twist(k, EPS)).compose(g_ij), d_i, grid).coords
        minus = reproject(intr, exp(_unit_twist(k, -EPS)).compose(g_ij), d_i, grid).coords
        numeric[..., k] = (plus - minus) / (2 * EPS)
    return relative_error(J_pose[valid], numeric[valid])


def check_camera_depth_jacobian(rng: np.random.Generator) -> float:
    intr, g_ij, d_i, grid = _camera_instance(rng)
    _, J_depth = reproject_jacobians(intr, g_ij, d_i, grid)
    valid = reproject(intr, g_ij, d_i, grid).valid
    # each pixel depends only on its own depth
    plus = reproject(intr, g_ij, d_i + EPS, grid).coords
    minus = reproject(intr, g_ij, d_i - EPS, grid).coords
    numeric = (plus - minus) / (2 * EPS)
    return relative_error(J_depth[..., 0][valid], numeric[valid])


# ----------------------------
# DBA
# ----------------------------
def _dba_instance(rng: np.random.Generator, n_frames: int = 4) -> BAProblem:
    height, width = 6, 8
    intr = Intrinsics(fx=8.0, fy=8.0, cx=3.5, cy=2.5, width=width, height=height)
    frames = []
    for fid in range(n_frames):
        pose = PoseSE3.identity() if fid == 0 else exp(random_twist(rng, rng.uniform(0.02, 0.06)))
        frames.append(Frame(
            id=fid,
            timestamp=0.1 * fid,
            image=None,
            pose=pose,
            inv_depth=rng.uniform(0.5, 1.0, size=(height, width)),
        ))
    graph = FrameGraph.from_frames(frames, window=3, n_fixed=2)
    grid = PixelGrid.for_shape(height, width)
    for edge in graph.sorted_edges():
        fi, fj = graph.frames[edge.i], graph.frames[edge.j]
        proj = reproject(intr, relative(fi.pose, fj.pose), fi.inv_depth, grid)
        edge.target = CorrespondenceField(
            coords=np.where(proj.valid[..., None], proj.coords, grid.coords) + rng.normal(0.0, 0.5, (height, width, 2)),
            valid=np.ones((height, width), dtype=bool),
        )
        edge.confidence_logit = rng.normal(0.0, 1.0, (height, width))
        edge.mask = DynamicMask(values=rng.uniform(0.0, 1.0, (height, width)))
    return BAProblem(graph=graph, intr=intr)


def _pixel_cost(problem: BAProblem, frame_id: int) -> np.ndarray:
    """Cost contribution of each pixel of frame_id (its outgoing edges only)."""
    out = None
    for res in residuals(problem):
        if res.edge.i != frame_id:
            continue
        term = res.weights * np.sum(res.residual * res.residual, axis=-1)
        out = term if out is None else out + term
    return out


def check_dba_cost_gradient(rng: np.random.Generator) -> float:
    problem = _dba_instance(rng)
    pose_grad, depth_grad = cost_gradient(problem)
    graph = problem.graph
    errors = []

    for fid, analytic in pose_grad.items():
        numeric = np.zeros(6)
        for k in range(6):
            costs = []
            for sign in (1.0, -1.0):
                moved = graph.snapshot()
                moved.set_pose(fid, retract(moved.frames[fid].pose, _unit_twist(k, sign * EPS)))
                costs.append(total_cost(problem.with_graph(moved)))
            numeric[k] = (costs[0] - costs[1]) / (2 * EPS)
        errors.append(relative_error(analytic, numeric))

    for fid, analytic in depth_grad.items():
        maps = []
        for sign in (1.0, -1.0):
            moved = graph.snapshot()
            moved.set_inv_depth(fid, moved.frames[fid].inv_depth + sign * EPS)
            maps.append(_pixel_cost(problem.with_graph(moved), fid))
        numeric = (maps[0] - maps[1]) / (2 * EPS)
        errors.append(relative_error(analytic, numeric))
    return max(errors)


# ----------------------------
# Photometric
# ----------------------------
def check_ssim_gradient(rng: np.random.Generator) -> float:
    shape = (8, 10)
    a = rng.uniform(0.0, 1.0, shape)
    b = np.clip(a + rng.normal(0.0, 0.1, shape), 0.0, 1.0)
    upstream = rng.uniform(0.5, 1.5, shape)
    window = 5
    analytic = ssim_grad(a, b, upstream, window=window)
    numeric = np.zeros(shape)
    for idx in np.ndindex(shape):
        plus, minus = a.copy(), a.copy()
        plus[idx] += EPS
        minus[idx] -= EPS
        numeric[idx] = (np.sum(upstream * ssim(plus, b, window)) - np.sum(upstream * ssim(minus, b, window))) / (2 * EPS)
    return relative_error(analytic, numeric)


def _flow_abs_map(img_i: np.ndarray, img_j: np.ndarray, flow: FlowField) -> np.ndarray:
    grid = PixelGrid.for_shape(*img_i.shape)
    warped, valid = warp_image(img_j, flow.target_coords(grid))
    return np.where(valid & flow.valid, np.abs(img_i - warped), 0.0)


def check_flow_photo_gradient(rng: np.random.Generator) -> float:
    shape = (10, 12)
    img_i = rng.uniform(0.0, 1.0, shape)
    img_j = rng.uniform(0.0, 1.0, shape)
    flow = FlowField.from_array(rng.uniform(-1.5, 1.5, shape + (2,)))
    analytic = flow_photo_grad(img_i, img_j, flow)
    grid = PixelGrid.for_shape(*shape)
    _, valid = warp_image(img_j, flow.target_coords(grid))
    n = int(valid.sum())
    numeric = np.zeros(shape + (2,))
    # each pixel's term depends only on its own flow vector
    for c in range(2):
        maps = []
        for sign in (1.0, -1.0):
            moved = flow.as_array().copy()
            moved[..., c] += sign * EPS
            maps.append(_flow_abs_map(img_i, img_j, FlowField.from_array(moved, valid=flow.valid)))
        numeric[..., c] = (maps[0] - maps[1]) / (2 * EPS) / n
    return relative_error(analytic[valid], numeric[valid])


def check_mask_ce_gradient(rng: np.random.Generator) -> float:
    shape = (6, 8)
    pred = DynamicMask(values=rng.uniform(0.05, 0.95, shape))
    label = DynamicMask(values=(rng.uniform(size=shape) < 0.5).astype(np.float64))
    analytic = mask_ce_grad(pred, label)
    numeric = np.zeros(shape)
    for idx in np.ndindex(shape):
        plus, minus = pred.values.copy(), pred.values.copy()
        plus[idx] += EPS
        minus[idx] -= EPS
        numeric[idx] = (mask_ce_loss(DynamicMask(plus), label) - mask_ce_loss(DynamicMask(minus), label)) / (2 * EPS)
    return relative_error(analytic, numeric)


def _checks(break_jacobian: bool) -> Dict[str, Callable[[np.random.Generator], float]]:
    pose_scale = BROKEN_JACOBIAN_SCALE if break_jacobian else 1.0
    return {
        "camera_pose_jacobian": lambda rng: check_camera_pose_jacobian(rng, pose_scale),
        "camera_depth_jacobian": check_camera_depth_jacobian,
        "dba_cost_gradient": check_dba_cost_gradient,
        "photometric_ssim_gradient": check_ssim_gradient,
        "photometric_flow_gradient": check_flow_photo_gradient,
        "photometric_mask_ce_gradient": check_mask_ce_gradient,
    }


def run_gradchecks(
    seed: int = 0,
    instances: int = DEFAULT_INSTANCES,
    break_jacobian: bool = False,
    tol: float = REL_TOL,
) -> List[CheckResult]:
    """
    Run every check over `instances` random draws.

    Args:
        seed: Root seed; check k, instance n draws from default_rng([seed, k, n])
        instances: Random instances per check
        break_jacobian: Corrupt the analytic pose Jacobian (negative control)
        tol: Pass threshold on the worst relative error

    Returns:
        One CheckResult per check, in a fixed order
    """
    results = []
    for k, (name, check) in enumerate(_checks(break_jacobian).items()):
        worst = max(check(np.random.default_rng([seed, k, n])) for n in range(instances))
        results.append(CheckResult(name=name, max_rel_error=worst, passed=worst < tol))
    return results
