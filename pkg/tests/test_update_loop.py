"""Tests for the target providers and the outer update loop."""

import itertools

import numpy as np
import pytest

from dualflow_vo.config import RunConfig
from dualflow_vo.core import update_loop
from dualflow_vo.core.camera import Intrinsics, PixelGrid, reproject
from dualflow_vo.core.dualflow import FlowField, artificial_mask, compose_flow
from dualflow_vo.core.framegraph import FrameGraph, frames_from_arrays
from dualflow_vo.core.providers import CorrelationProvider, OracleProvider, make_provider
from dualflow_vo.core.se3 import PoseSE3, relative
from dualflow_vo.core.update_loop import SolverState, iterate_once, run, update_edge
from dualflow_vo.errors import ConfigError, Diverged, MissingGroundTruth
from dualflow_vo.evaluation.trajectory import ate_rmse, trajectory_from_poses
from dualflow_vo.monitoring.metrics import segmentation_metrics
from dualflow_vo.sim.world import generate, gt_flows, mover_config, perturb, scene_graph


def _state(scene, graph, **overrides):
    config = RunConfig(**overrides)
    provider = make_provider("oracle", scene=scene, noise_sigma=config.noise_sigma, seed=config.seed)
    return SolverState.create(graph, scene.intr, config, provider)


def _ate(scene, graph):
    stamps = [f.timestamp for f in scene.frames]
    est = trajectory_from_poses(stamps, [graph.frames[f.index].pose for f in scene.frames])
    gt = trajectory_from_poses(stamps, [f.gt_pose for f in scene.frames])
    return ate_rmse(est, gt)


def _ablation_scene(seed, dynamic_fraction=0.3):
    """Mover slides along x while the camera travels along y."""
    config = mover_config(seed, dynamic_fraction=dynamic_fraction)
    config["trajectory"]["direction"] = [0.0, 1.0, 0.0]
    return generate(config, seed)


def _ablation_ate(scene, single_flow):
    graph = perturb(scene_graph(scene), pose_sigma=0.02, depth_sigma=0.05, seed=scene.seed)
    result = run(_state(scene, graph, max_outer_iters=15, single_flow=single_flow))
    return _ate(scene, result.graph)


@pytest.fixture(scope="module")
def static_scene():
    return generate(seed=0)


@pytest.fixture(scope="module")
def mover_scene():
    return generate(mover_config(0, dynamic_fraction=0.25), 0)


# ----------------------------
# Providers
# ----------------------------

def test_oracle_without_noise_returns_gt_correspondence(mover_scene):
    graph = scene_graph(mover_scene)
    edge = graph.edges[(1, 3)]
    measured, logits = OracleProvider(scene=mover_scene).acquire(graph, mover_scene.intr, edge, None)
    expected = gt_flows(mover_scene, 1, 3).optical.target_coords(PixelGrid.for_intrinsics(mover_scene.intr))
    np.testing.assert_array_equal(measured.coords, expected.coords)
    np.testing.assert_array_equal(measured.valid, expected.valid)
    assert np.all(logits == 0.0)


def test_oracle_noise_statistics_and_caching(static_scene):
    graph = scene_graph(static_scene)
    edge = graph.edges[(0, 1)]
    clean, _ = OracleProvider(scene=static_scene).acquire(graph, static_scene.intr, edge, None)
    provider = OracleProvider(scene=static_scene, noise_sigma=0.3, seed=1)
    noisy, _ = provider.acquire(graph, static_scene.intr, edge, None)
    residual = (noisy.coords - clean.coords).ravel()
    assert abs(residual.std() - 0.3) < 0.02
    assert abs(residual.mean()) < 0.02

    again, _ = provider.acquire(graph, static_scene.intr, edge, None)
    np.testing.assert_array_equal(again.coords, noisy.coords)
    other, _ = provider.acquire(graph, static_scene.intr, graph.edges[(1, 0)], None)
    assert not np.array_equal(other.coords - noisy.coords, np.zeros_like(noisy.coords))


def test_oracle_needs_scene(static_scene):
    graph = scene_graph(static_scene)
    with pytest.raises(MissingGroundTruth):
        OracleProvider(scene=None).acquire(graph, static_scene.intr, graph.edges[(0, 1)], None)


def test_make_provider_rejects_unknown_name():
    with pytest.raises(ConfigError):
        make_provider("lidar")


def test_correlation_provider_identical_frames_gives_zero_flow():
    h, w = 16, 24
    intr = Intrinsics(fx=16.0, fy=16.0, cx=11.5, cy=7.5, width=w, height=h)
    image = np.random.default_rng(0).uniform(0.0, 1.0, (h, w))
    frames = frames_from_arrays(
        images=[image, image.copy()],
        poses=[PoseSE3.identity(), PoseSE3.identity()],
        inv_depths=[np.full((h, w), 0.5), np.full((h, w), 0.5)],
        timestamps=[0.0, 0.1],
    )
    graph = FrameGraph.from_frames(frames, window=1, n_fixed=1)
    grid = PixelGrid.for_shape(h, w)
    static_corr = reproject(intr, PoseSE3.identity(), frames[0].inv_depth, grid)
    measured, _ = CorrelationProvider().acquire(graph, intr, graph.edges[(0, 1)], static_corr)
    assert measured.valid.all()
    np.testing.assert_allclose(FlowField.between(measured, grid).as_array(), 0.0, atol=1e-9)


# ----------------------------
# Edge update
# ----------------------------

def test_static_scene_iteration_has_no_dynamic_flow(static_scene):
    state = iterate_once(_state(static_scene, scene_graph(static_scene)))
    assert state.k == 1
    for edge in state.graph.sorted_edges():
        assert np.all(edge.mask.values == 1.0)
        assert np.max(np.abs(edge.dyn_flow.as_array())) < 1e-9


def test_mover_mask_recall(mover_scene):
    state = _state(mover_scene, scene_graph(mover_scene))
    for edge in state.graph.sorted_edges():
        update_edge(state, edge)
    for edge in state.graph.sorted_edges():
        gt = gt_flows(mover_scene, edge.i, edge.j)
        true_dynamic = gt.dynamic.magnitude() > 2 * state.config.mu
        if not (true_dynamic & gt.dynamic.valid).any():
            continue
        metrics = segmentation_metrics(edge.mask.dynamic(), true_dynamic, valid=gt.dynamic.valid)
        assert metrics.recall >= 0.95, edge.key


def test_decomposition_identity(mover_scene):
    state = _state(mover_scene, scene_graph(mover_scene))
    grid = PixelGrid.for_intrinsics(mover_scene.intr)
    for edge in state.graph.sorted_edges():
        update_edge(state, edge)
        measured, _ = state.provider.acquire(state.graph, state.intr, edge, None)
        valid = measured.valid
        recombined = edge.target.coords + edge.dyn_flow.as_array()
        np.testing.assert_allclose(recombined[valid], measured.coords[valid], atol=1e-12)
        expected = compose_flow(FlowField.between(edge.target, grid), edge.dyn_flow)
        np.testing.assert_array_equal(edge.optical_flow.du, expected.du)
        np.testing.assert_array_equal(edge.optical_flow.dv, expected.dv)


def test_single_flow_edge_update(mover_scene):
    state = _state(mover_scene, scene_graph(mover_scene), single_flow=True)
    edge = state.graph.edges[(0, 2)]
    update_edge(state, edge)
    measured, _ = state.provider.acquire(state.graph, state.intr, edge, None)
    assert np.all(edge.mask.values == 1.0)
    assert np.all(edge.dyn_flow.as_array() == 0.0)
    np.testing.assert_array_equal(edge.target.coords, measured.coords)


# ----------------------------
# Outer loop
# ----------------------------

def test_static_run_recovers_trajectory(static_scene):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.02, depth_sigma=0.05, seed=0)
    result = run(_state(static_scene, graph, max_outer_iters=15))
    assert _ate(static_scene, result.graph) < 1e-3
    assert result.total_loss is not None
    assert len(result.losses) == len(result.iterations)
    for fid in result.graph.fixed_ids():
        np.testing.assert_array_equal(result.poses()[fid].matrix(), graph.frames[fid].pose.matrix())


def test_zero_iterations_leaves_state_unchanged(static_scene):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.02, depth_sigma=0.05, seed=2)
    before = graph.snapshot()
    result = run(_state(static_scene, graph, max_outer_iters=0))
    assert result.iterations == []
    assert result.total_loss is None
    assert not result.converged
    for fid in before.frame_ids():
        np.testing.assert_array_equal(result.poses()[fid].matrix(), before.frames[fid].pose.matrix())
        np.testing.assert_array_equal(result.inv_depths()[fid], before.frames[fid].inv_depth)


def test_single_flow_matches_dual_flow_on_static_scene(static_scene):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.005, depth_sigma=0.01, seed=3)
    dual = run(_state(static_scene, graph.snapshot(), max_outer_iters=4))
    single = run(_state(static_scene, graph.snapshot(), max_outer_iters=4, single_flow=True))
    for fid in graph.frame_ids():
        delta = relative(single.poses()[fid], dual.poses()[fid])
        np.testing.assert_allclose(delta.matrix(), np.eye(4), atol=1e-9)


def test_run_result_exposes_edge_outputs(mover_scene):
    result = run(_state(mover_scene, scene_graph(mover_scene), max_outer_iters=1))
    keys = [edge.key for edge in result.graph.sorted_edges()]
    assert list(result.masks()) == keys
    assert list(result.dynamic_flows()) == keys
    assert list(result.optical_flows()) == keys


def test_rejected_steps_stall_instead_of_diverging(static_scene, monkeypatch):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.05, depth_sigma=0.0, seed=4)
    monkeypatch.setattr(update_loop, "accepts", lambda before, after: False)
    result = run(_state(static_scene, graph, max_outer_iters=10, divergence_patience=3))
    # three rejections end warm-up, three more end the run
    assert result.converged
    assert len(result.iterations) == 6
    assert all(not rec.accepted for rec in result.iterations)
    for fid in graph.frame_ids():
        np.testing.assert_array_equal(result.poses()[fid].matrix(), graph.frames[fid].pose.matrix())


def test_diverged_after_rising_accepted_costs(static_scene, monkeypatch):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.05, depth_sigma=0.0, seed=4)
    calls = itertools.count()
    # both evaluations of an attempt agree, so every step is accepted at a higher cost
    monkeypatch.setattr(update_loop, "total_cost", lambda problem: float(next(calls) // 2))
    state = _state(static_scene, graph, max_outer_iters=10, divergence_patience=3,
                   mask_scale_factor=0.0, step_tol=0.0)
    with pytest.raises(Diverged) as info:
        run(state)
    partial = info.value.partial
    assert partial is not None
    assert len(partial.iterations) == 3
    assert all(rec.accepted for rec in partial.iterations)
    assert info.value.exit_code == 3


def test_noisy_static_run_converges(static_scene):
    graph = perturb(scene_graph(static_scene), pose_sigma=0.02, depth_sigma=0.05, seed=0)
    initial = _ate(static_scene, graph)
    result = run(_state(static_scene, graph, max_outer_iters=20, noise_sigma=0.05))
    final = _ate(static_scene, result.graph)
    assert final < 5e-3
    assert final < 0.25 * initial


def test_mask_is_idempotent_after_noisy_run(mover_scene):
    state = _state(mover_scene, scene_graph(mover_scene), max_outer_iters=8, noise_sigma=0.3)
    result = run(state)
    grid = PixelGrid.for_intrinsics(mover_scene.intr)
    compared = 0
    for edge in result.graph.sorted_edges():
        fi, fj = result.graph.frames[edge.i], result.graph.frames[edge.j]
        g_ij = relative(fi.pose, fj.pose)
        label = artificial_mask(mover_scene.intr, g_ij, fi.inv_depth, edge.optical_flow, grid, mu=0.5)
        valid = edge.optical_flow.valid & reproject(mover_scene.intr, g_ij, fi.inv_depth, grid).valid
        np.testing.assert_array_equal(label.values[valid], edge.mask.values[valid])
        compared += int(valid.sum())
    assert compared > 0
    # noise alone pushes some background pixels past mu
    flagged_background = sum(
        int(np.sum(edge.mask.dynamic() & (mover_scene.frames[edge.i].gt_label == 0)))
        for edge in result.graph.sorted_edges()
    )
    assert flagged_background > 0


def test_warmup_threshold_falls_back_to_mu(static_scene):
    state = _state(static_scene, scene_graph(static_scene))
    dist = np.full((4, 4), 1.0)
    valid = np.ones((4, 4), dtype=bool)
    assert state.warmup
    assert state.mask_threshold(dist, valid) == pytest.approx(3.0)
    state.end_warmup()
    assert not state.warmup
    assert state.mask_threshold(dist, valid) == 0.5


def test_zero_scale_factor_skips_warmup(static_scene):
    state = _state(static_scene, scene_graph(static_scene), mask_scale_factor=0.0)
    assert not state.warmup
    assert state.mask_threshold(np.full((2, 2), 9.0), np.ones((2, 2), dtype=bool)) == 0.5


def test_dual_flow_beats_single_flow_on_mover():
    scene = _ablation_scene(0)
    dual = _ablation_ate(scene, single_flow=False)
    single = _ablation_ate(scene, single_flow=True)
    assert dual <= 0.2 * single


@pytest.mark.slow
def test_dual_flow_ablation_over_ten_scenes():
    wins = 0
    for seed in range(10):
        scene = _ablation_scene(seed, dynamic_fraction=0.25 + 0.01 * seed)
        if _ablation_ate(scene, single_flow=False) <= 0.2 * _ablation_ate(scene, single_flow=True):
            wins += 1
    assert wins >= 9
