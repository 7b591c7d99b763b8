"""
dualflow-vo Core: Update Loop

Classical dynamic update: per edge, acquire measured optical flow, split it
into static and dynamic parts, refresh the dynamic mask, build the static
BA target and confidence; then take one damped DBA step over the whole
graph. `run` repeats this until the step falls below tolerance.

A run has two phases. During warm-up the mask threshold is raised to
mask_scale_factor x the median residual of each edge, so a badly initialized
camera does not flag the whole image; once warm-up converges the loop
continues with the plain mu threshold. The run ends with a relabel pass at mu,
so the stored masks are exactly the artificial mask of the returned state.

Consecutive rejected steps mean the solver has stalled and end the phase.
Only cost increases across accepted iterations count towards divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..config import RunConfig
from ..errors import Diverged, DualFlowError
from ..monitoring.logging import get_solver_logger
from .camera import CorrespondenceField, Intrinsics, PixelGrid, reproject
from .dba import (
    DAMPING_DOWN,
    DAMPING_FLOOR,
    DAMPING_UP,
    BAProblem,
    IterationRecord,
    accepts,
    apply_step,
    gauss_newton_step,
    rises,
    total_cost,
)
from .dualflow import DynamicMask, FlowField, artificial_mask, compose_flow
from .framegraph import Edge, FrameGraph
from .photometric import IterationLosses, iteration_losses, total_self_sup_loss
from .providers import TargetProvider
from .se3 import PoseSE3, relative


@dataclass
class SolverState:
    """Everything the outer loop carries between iterations."""
    graph: FrameGraph
    intr: Intrinsics
    config: RunConfig
    provider: TargetProvider
    k: int = 0
    damping: float = 1e-4
    rejected: int = 0
    rising: int = 0
    last_cost: Optional[float] = None
    warmup: bool = False
    converged: bool = False
    iterations: List[IterationRecord] = field(default_factory=list)
    losses: List[IterationLosses] = field(default_factory=list)
    gt_masks: Optional[Dict[Tuple[int, int], DynamicMask]] = None

    @classmethod
    def create(cls, graph: FrameGraph, intr: Intrinsics, config: RunConfig, provider: TargetProvider,
               gt_masks: Optional[Dict[Tuple[int, int], DynamicMask]] = None) -> SolverState:
        return cls(graph=graph, intr=intr, config=config, provider=provider,
                   damping=config.damping, warmup=config.mask_scale_factor > 0, gt_masks=gt_masks)

    def mask_threshold(self, dist: np.ndarray, valid: np.ndarray) -> float:
        """mu, raised to mask_scale_factor x median residual while warming up."""
        mu = self.config.mu
        if not self.warmup or not valid.any():
            return mu
        return max(mu, self.config.mask_scale_factor * float(np.median(dist[valid])))

    def end_warmup(self) -> None:
        """Switch to the plain mu threshold and restart the convergence test."""
        self.warmup = False
        self.converged = False
        self.rejected = 0
        self.rising = 0
        self.last_cost = None
        self.damping = self.config.damping
        get_solver_logger().log_event("warmup_done", self.k, mu=self.config.mu)

    def problem(self) -> BAProblem:
        return BAProblem(
            graph=self.graph,
            intr=self.intr,
            eta=self.config.eta,
            damping=self.damping,
            depth_prior_weight=self.config.depth_prior_weight,
            step_tol=self.config.step_tol,
            invert_mask_weight=self.config.invert_mask_weight,
            divergence_patience=self.config.divergence_patience,
        )


@dataclass
class RunResult:
    """Final state of a run plus its per-iteration records."""
    graph: FrameGraph
    iterations: List[IterationRecord]
    losses: List[IterationLosses]
    total_loss: Optional[float]
    converged: bool

    def poses(self) -> Dict[int, PoseSE3]:
        return {fid: self.graph.frames[fid].pose for fid in self.graph.frame_ids()}

    def inv_depths(self) -> Dict[int, np.ndarray]:
        return {fid: self.graph.frames[fid].inv_depth for fid in self.graph.frame_ids()}

    def masks(self) -> Dict[Tuple[int, int], DynamicMask]:
        return {e.key: e.mask for e in self.graph.sorted_edges() if e.mask is not None}

    def dynamic_flows(self) -> Dict[Tuple[int, int], FlowField]:
        return {e.key: e.dyn_flow for e in self.graph.sorted_edges() if e.dyn_flow is not None}

    def optical_flows(self) -> Dict[Tuple[int, int], FlowField]:
        return {e.key: e.optical_flow for e in self.graph.sorted_edges() if e.optical_flow is not None}


def acquire_targets(state: SolverState, edge: Edge) -> Tuple[CorrespondenceField, np.ndarray, CorrespondenceField]:
    """
    Measured optical-flow correspondence and logits for one edge.

    Returns:
        (measured correspondence, confidence logits, current static correspondence)
    """
    fi, fj = state.graph.frames[edge.i], state.graph.frames[edge.j]
    grid = PixelGrid.for_shape(*fi.inv_depth.shape)
    static_corr = reproject(state.intr, relative(fi.pose, fj.pose), fi.inv_depth, grid)
    measured, logits = state.provider.acquire(state.graph, state.intr, edge, static_corr)
    return measured, logits, static_corr


def update_edge(state: SolverState, edge: Edge) -> None:
    """Refresh target, mask, dynamic flow and optical flow of one edge in place."""
    fi, fj = state.graph.frames[edge.i], state.graph.frames[edge.j]
    grid = PixelGrid.for_shape(*fi.inv_depth.shape)
    measured, logits, static_corr = acquire_targets(state, edge)
    height, width = grid.shape

    if state.config.single_flow:
        mask = DynamicMask.static(height, width)
        f_d = FlowField.zeros(height, width)
        f_d.valid = measured.valid.copy()
        target_coords = measured.coords
    else:
        with np.errstate(invalid="ignore"):
            raw = measured.coords - static_corr.coords
        valid = measured.valid & static_corr.valid
        threshold = state.mask_threshold(np.hypot(raw[..., 0], raw[..., 1]), valid)
        label = artificial_mask(
            state.intr, relative(fi.pose, fj.pose), fi.inv_depth,
            FlowField.between(measured, grid), grid, threshold,
        )
        old = edge.mask if edge.mask is not None else DynamicMask.static(height, width)
        mask = DynamicMask(values=np.clip(old.values + (label.values - old.values), 0.0, 1.0))
        dynamic = mask.dynamic() & valid
        f_d = FlowField(
            du=np.where(dynamic, raw[..., 0], 0.0),
            dv=np.where(dynamic, raw[..., 1], 0.0),
            valid=measured.valid.copy(),
        )
        target_coords = measured.coords - f_d.as_array()

    target = CorrespondenceField(coords=target_coords, valid=measured.valid.copy())
    edge.target = target
    edge.confidence_logit = logits
    edge.mask = mask
    edge.dyn_flow = f_d
    edge.optical_flow = compose_flow(FlowField.between(target, grid), f_d)


def _dba_attempt(state: SolverState) -> IterationRecord:
    """One damped DBA step with Levenberg accept/reject."""
    problem = state.problem()
    cost = total_cost(problem)
    step = gauss_newton_step(problem, state.damping)
    step_norm = step.max_twist_norm
    candidate = apply_step(state.graph, step)
    new_cost = total_cost(problem.with_graph(candidate))
    logger = get_solver_logger()

    patience = state.config.divergence_patience

    if accepts(cost, new_cost):
        state.graph = candidate
        state.damping = max(state.damping / DAMPING_DOWN, DAMPING_FLOOR)
        state.rejected = 0
        state.converged = step_norm < state.config.step_tol
        logger.log_event("dba_step", state.k, cost=new_cost, max_twist_norm=step_norm, damping=state.damping)
        # targets change between outer iterations
        state.rising = state.rising + 1 if rises(state.last_cost, new_cost) else 0
        state.last_cost = new_cost
        if state.rising >= patience:
            raise Diverged(f"cost increased on {state.rising} consecutive accepted outer iterations")
        return IterationRecord(state.k, new_cost, step_norm, state.damping)

    state.damping *= DAMPING_UP
    state.rejected += 1
    logger.log_event("step_rejected", state.k, cost=new_cost, previous_cost=cost, damping=state.damping)
    state.converged = step_norm < state.config.step_tol or state.rejected >= patience
    if state.rejected >= patience:
        logger.log_event("solver_stalled", state.k, cost=cost, rejected=state.rejected, damping=state.damping)
    return IterationRecord(state.k, cost, step_norm, state.damping, accepted=False)


def iterate_once(state: SolverState) -> SolverState:
    """
    One outer iteration: refresh every edge, then take one DBA step.

    Raises:
        SingularSystem, Diverged, MissingGroundTruth: propagated
    """
    for edge in state.graph.sorted_edges():
        update_edge(state, edge)

    record = _dba_attempt(state)
    state.iterations.append(record)

    losses = iteration_losses(state.graph, state.intr, state.config, gt_masks=state.gt_masks)
    state.losses.append(losses)
    get_solver_logger().log_event(
        "outer_iteration", state.k,
        cost=record.cost, max_twist_norm=record.max_twist_norm, damping=record.damping,
        geo=losses.geo, flow=losses.flow, mask=losses.mask,
    )
    state.k += 1
    return state


def _result(state: SolverState) -> RunResult:
    total = total_self_sup_loss(state.losses, state.config.loss) if state.losses else None
    return RunResult(
        graph=state.graph,
        iterations=list(state.iterations),
        losses=list(state.losses),
        total_loss=total,
        converged=state.converged,
    )


def refresh_masks(state: SolverState) -> None:
    """Relabel every edge of the current state with the plain mu threshold."""
    state.warmup = False
    for edge in state.graph.sorted_edges():
        update_edge(state, edge)


def run(state: SolverState) -> RunResult:
    """
    Repeat iterate_once until the DBA step falls below step_tol, the solver
    stalls, or max_outer_iters is reached.

    Raises:
        DualFlowError: numerical failures carry the partial RunResult in `.partial`
    """
    try:
        while state.k < state.config.max_outer_iters:
            iterate_once(state)
            if state.converged:
                if not state.warmup:
                    break
                state.end_warmup()
        if state.k > 0:
            refresh_masks(state)
    except DualFlowError as e:
        e.partial = _result(state)
        raise
    return _result(state)
