"""
dualflow-vo Core: Dense Bundle Adjustment

Masked-confidence Gauss-Newton over all free frame poses and every
per-pixel inverse depth. Depths are eliminated with the Schur complement
(their block is diagonal), the reduced pose system is solved by Cholesky
factorization, and steps are damped Levenberg-style.

Residual of edge (i, j) at pixel p:
    r = p*_s - pi(G_ij o pi^-1(p, d_i))
weighted by w_d = sigmoid(w + (1 - M_d) * eta).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit

from ..errors import ConfigError, Diverged, ShapeMismatch, SingularSystem
from ..monitoring.logging import get_solver_logger
from .camera import Intrinsics, PixelGrid, reproject, reproject_jacobians
from .dualflow import DynamicMask
from .framegraph import Edge, FrameGraph
from .se3 import Twist, relative, retract


DEFAULT_ETA = 10.0
DEFAULT_DAMPING = 1e-4
DEFAULT_DEPTH_PRIOR = 1e-3
DEPTH_MIN = 1e-4
DEPTH_MAX = 1e4
DAMPING_UP = 10.0
DAMPING_DOWN = 2.0
DAMPING_FLOOR = 1e-12
DIVERGENCE_PATIENCE = 3
COST_RTOL = 1e-12


@dataclass
class ConfidenceMap:
    """Raw logits w and combined weights w_d in (0, 1)."""
    logits: np.ndarray
    weights: np.ndarray


def combine_confidence(
    w: np.ndarray,
    mask: DynamicMask,
    eta: float = DEFAULT_ETA,
    invert: bool = False,
) -> ConfidenceMap:
    """
    w_d = sigmoid(w + (1 - M_d) * eta).

    `invert` switches the mask term to M_d * eta, up-weighting static pixels
    instead of dynamic ones.

    Raises:
        ShapeMismatch: if logits and mask differ in shape
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != mask.shape:
        raise ShapeMismatch(f"logits {w.shape} do not match mask {mask.shape}")
    gate = mask.values if invert else (1.0 - mask.values)
    return ConfidenceMap(logits=w, weights=expit(w + gate * eta))


@dataclass
class BAProblem:
    """A frame graph plus the knobs of one DBA solve."""
    graph: FrameGraph
    intr: Intrinsics
    eta: float = DEFAULT_ETA
    damping: float = DEFAULT_DAMPING
    depth_prior_weight: float = DEFAULT_DEPTH_PRIOR
    max_iters: int = 10
    step_tol: float = 1e-6
    invert_mask_weight: bool = False
    divergence_patience: int = DIVERGENCE_PATIENCE

    def __post_init__(self):
        if len(self.graph.fixed_ids()) < 2:
            raise ConfigError("bundle adjustment needs at least two fixed frames")
        for edge in self.graph.edges.values():
            if edge.target is None or edge.confidence_logit is None:
                raise ConfigError(f"edge ({edge.i}, {edge.j}) has no target or confidence")

    def with_graph(self, graph: FrameGraph) -> BAProblem:
        return BAProblem(
            graph=graph,
            intr=self.intr,
            eta=self.eta,
            damping=self.damping,
            depth_prior_weight=self.depth_prior_weight,
            max_iters=self.max_iters,
            step_tol=self.step_tol,
            invert_mask_weight=self.invert_mask_weight,
            divergence_patience=self.divergence_patience,
        )


@dataclass
class EdgeResidual:
    """Residual field of one edge with the pixels that contribute."""
    edge: Edge
    residual: np.ndarray  # (H, W, 2), zero where invalid
    valid: np.ndarray
    weights: np.ndarray  # w_d, zero where invalid


@dataclass
class LinearSystem:
    """
    Damped normal equations.

    B: pose-pose (6n x 6n); E: pose-depth (6n x m*HW); C: depth diagonal (m*HW,);
    v, w: right-hand sides J^T W r for poses and depths.
    """
    B: np.ndarray
    E: np.ndarray
    C: np.ndarray
    v: np.ndarray
    w: np.ndarray
    pose_ids: List[int]
    depth_ids: List[int]
    depth_shape: Tuple[int, int]

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Full (6n + m*HW) square matrix and right-hand side."""
        H = np.block([[self.B, self.E], [self.E.T, np.diag(self.C)]])
        return H, np.concatenate([self.v, self.w])


@dataclass
class StepResult:
    """Increments of one Gauss-Newton step."""
    twists: Dict[int, Twist]
    depth_increments: Dict[int, np.ndarray]

    @property
    def max_twist_norm(self) -> float:
        return max((t.norm() for t in self.twists.values()), default=0.0)


@dataclass
class IterationRecord:
    iter: int
    cost: float
    max_twist_norm: float
    damping: float
    accepted: bool = True


@dataclass
class SolveResult:
    graph: FrameGraph
    log: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    damping: float = DEFAULT_DAMPING


def _edge_weights(problem: BAProblem, edge: Edge) -> np.ndarray:
    mask = edge.mask if edge.mask is not None else DynamicMask.static(*edge.confidence_logit.shape)
    return combine_confidence(edge.confidence_logit, mask, problem.eta, problem.invert_mask_weight).weights


def residuals(problem: BAProblem) -> List[EdgeResidual]:
    """Per-edge residual fields; invalid pixels contribute zero."""
    out = []
    for edge in problem.graph.sorted_edges():
        fi, fj = problem.graph.frames[edge.i], problem.graph.frames[edge.j]
        grid = PixelGrid.for_shape(*fi.inv_depth.shape)
        proj = reproject(problem.intr, relative(fi.pose, fj.pose), fi.inv_depth, grid)
        valid = proj.valid & edge.target.valid
        with np.errstate(invalid="ignore"):
            r = np.where(valid[..., None], edge.target.coords - proj.coords, 0.0)
        weights = np.where(valid, _edge_weights(problem, edge), 0.0)
        out.append(EdgeResidual(edge=edge, residual=r, valid=valid, weights=weights))
    return out


def total_cost(problem: BAProblem) -> float:
    """E = sum over edges and valid pixels of w_d * ||r||^2."""
    cost = 0.0
    for res in residuals(problem):
        cost += float(np.sum(res.weights * np.sum(res.residual * res.residual, axis=-1)))
    return cost


def build_system(problem: BAProblem, damping: Optional[float] = None) -> LinearSystem:
    """Assemble the damped normal equations, accumulating edges in sorted order."""
    damping = problem.damping if damping is None else damping
    graph = problem.graph
    pose_ids = graph.free_ids()
    depth_ids = graph.frame_ids()
    pose_index = {fid: k for k, fid in enumerate(pose_ids)}
    depth_index = {fid: k for k, fid in enumerate(depth_ids)}
    depth_shape = graph.frames[depth_ids[0]].inv_depth.shape
    hw = depth_shape[0] * depth_shape[1]

    n_pose = 6 * len(pose_ids)
    B = np.zeros((n_pose, n_pose))
    E = np.zeros((n_pose, len(depth_ids) * hw))
    C = np.zeros(len(depth_ids) * hw)
    v = np.zeros(n_pose)
    w = np.zeros(len(depth_ids) * hw)

    for res in residuals(problem):
        edge = res.edge
        fi, fj = graph.frames[edge.i], graph.frames[edge.j]
        if fi.inv_depth.shape != depth_shape:
            raise ShapeMismatch("all frames must share one depth resolution")
        grid = PixelGrid.for_shape(*depth_shape)
        g_ij = relative(fi.pose, fj.pose)
        J_pose, J_depth = reproject_jacobians(problem.intr, g_ij, fi.inv_depth, grid)
        valid = res.valid
        J_pose = np.where(valid[..., None, None], J_pose, 0.0).reshape(hw, 2, 6)
        J_depth = np.where(valid[..., None, None], J_depth, 0.0).reshape(hw, 2)
        r = res.residual.reshape(hw, 2)
        wt = res.weights.reshape(hw)

        blocks: Dict[int, np.ndarray] = {}
        if edge.j in pose_index:
            blocks[edge.j] = J_pose
        if edge.i in pose_index:
            blocks[edge.i] = -np.einsum("pkl,lm->pkm", J_pose, g_ij.adjoint())

        d_sl = slice(depth_index[edge.i] * hw, (depth_index[edge.i] + 1) * hw)
        C[d_sl] += wt * np.sum(J_depth * J_depth, axis=-1)
        w[d_sl] += wt * np.sum(J_depth * r, axis=-1)

        for a, Ja in blocks.items():
            sa = slice(6 * pose_index[a], 6 * pose_index[a] + 6)
            v[sa] += np.einsum("pkm,p,pk->m", Ja, wt, r)
            E[sa, d_sl] += np.einsum("pkm,p,pk->mp", Ja, wt, J_depth)
            for b, Jb in blocks.items():
                sb = slice(6 * pose_index[b], 6 * pose_index[b] + 6)
                B[sa, sb] += np.einsum("pkm,p,pkn->mn", Ja, wt, Jb)

    B[np.diag_indices_from(B)] += damping
    C += damping + problem.depth_prior_weight
    return LinearSystem(B=B, E=E, C=C, v=v, w=w, pose_ids=pose_ids, depth_ids=depth_ids, depth_shape=depth_shape)


def solve_schur(system: LinearSystem) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eliminate depths and solve the reduced pose system.

    Raises:
        SingularSystem: if the reduced system is not positive definite
    """
    C_inv = 1.0 / system.C
    if system.B.size == 0:
        return np.zeros(0), C_inv * system.w
    EC = system.E * C_inv
    S = system.B - EC @ system.E.T
    rhs = system.v - EC @ system.w
    S = 0.5 * (S + S.T)
    try:
        factor = linalg.cho_factor(S)
        dx = linalg.cho_solve(factor, rhs)
    except linalg.LinAlgError as e:
        raise SingularSystem(f"reduced pose system is not positive definite: {e}") from e
    if not np.all(np.isfinite(dx)):
        raise SingularSystem("reduced pose system produced non-finite increments")
    dd = C_inv * (system.w - system.E.T @ dx)
    return dx, dd


def cost_gradient(problem: BAProblem) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
    """
    Analytic gradient of the cost w.r.t. left twists of free poses and w.r.t. inverse depths.
    """
    system = build_system(problem, damping=0.0)
    hw = system.depth_shape[0] * system.depth_shape[1]
    pose_grad = {fid: -2.0 * system.v[6 * k:6 * k + 6] for k, fid in enumerate(system.pose_ids)}
    depth_grad = {
        fid: (-2.0 * system.w[k * hw:(k + 1) * hw]).reshape(system.depth_shape)
        for k, fid in enumerate(system.depth_ids)
    }
    return pose_grad, depth_grad


def gauss_newton_step(problem: BAProblem, damping: Optional[float] = None) -> StepResult:
    """
    One damped Gauss-Newton step.

    Raises:
        SingularSystem: if the reduced system is not positive definite after damping
    """
    system = build_system(problem, damping)
    dx, dd = solve_schur(system)
    hw = system.depth_shape[0] * system.depth_shape[1]
    twists = {fid: Twist.from_vector(dx[6 * k:6 * k + 6]) for k, fid in enumerate(system.pose_ids)}
    depth_increments = {
        fid: dd[k * hw:(k + 1) * hw].reshape(system.depth_shape)
        for k, fid in enumerate(system.depth_ids)
    }
    return StepResult(twists=twists, depth_increments=depth_increments)


def apply_step(graph: FrameGraph, step: StepResult) -> FrameGraph:
    """Retract poses and add clamped depth increments on a snapshot of the graph."""
    updated = graph.snapshot()
    for fid, twist in step.twists.items():
        updated.set_pose(fid, retract(updated.frames[fid].pose, twist))
    for fid, dd in step.depth_increments.items():
        updated.set_inv_depth(fid, np.clip(updated.frames[fid].inv_depth + dd, DEPTH_MIN, DEPTH_MAX))
    return updated


def accepts(cost_before: float, cost_after: float) -> bool:
    return cost_after <= cost_before + COST_RTOL * max(cost_before, 1.0)


def rises(cost_before: Optional[float], cost_after: float) -> bool:
    """True when an accepted cost is strictly above the previous accepted one."""
    return cost_before is not None and cost_after > cost_before


def solve(problem: BAProblem) -> SolveResult:
    """
    Iterate damped Gauss-Newton steps until the largest twist falls below
    step_tol or max_iters is reached.

    `divergence_patience` consecutive rejected steps end the solve as stalled
    (converged, state unchanged by those steps).

    Raises:
        SingularSystem: propagated from the linear solve
        Diverged: after `divergence_patience` consecutive accepted steps that raised the cost
    """
    logger = get_solver_logger()
    current = problem
    cost = total_cost(current)
    damping = problem.damping
    result = SolveResult(graph=problem.graph, damping=damping)
    rejected = 0
    rising = 0

    for it in range(problem.max_iters):
        step = gauss_newton_step(current, damping)
        step_norm = step.max_twist_norm
        candidate = apply_step(current.graph, step)
        new_cost = total_cost(current.with_graph(candidate))

        if accepts(cost, new_cost):
            rising = rising + 1 if rises(cost, new_cost) else 0
            current = current.with_graph(candidate)
            cost = new_cost
            damping = max(damping / DAMPING_DOWN, DAMPING_FLOOR)
            rejected = 0
            result.log.append(IterationRecord(it, cost, step_norm, damping))
            logger.log_event("dba_step", it, cost=cost, max_twist_norm=step_norm, damping=damping)
            if rising >= problem.divergence_patience:
                result.graph = current.graph
                result.damping = damping
                err = Diverged(f"cost increased on {rising} consecutive accepted steps")
                err.partial = result
                raise err
            if step_norm < problem.step_tol:
                result.converged = True
                break
        else:
            damping *= DAMPING_UP
            rejected += 1
            result.log.append(IterationRecord(it, cost, step_norm, damping, accepted=False))
            logger.log_event("step_rejected", it, cost=new_cost, previous_cost=cost, damping=damping)
            if step_norm < problem.step_tol or rejected >= problem.divergence_patience:
                if rejected >= problem.divergence_patience:
                    logger.log_event("solver_stalled", it, cost=cost, rejected=rejected, damping=damping)
                result.converged = True
                break

    result.graph = current.graph
    result.damping = damping
    return result
