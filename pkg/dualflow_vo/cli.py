#!/usr/bin/env python3
"""
dualflow-vo CLI - command-line interface using Typer

Commands:
    simulate    render a synthetic scene with ground truth
    solve       run the dual-flow update loop on a simulated scene
    eval        ATE of an estimated TUM trajectory against ground truth
    decompose   split an optical flow into static and dynamic parts
    gradcheck   finite-difference checks of every analytic derivative

Exit codes: 0 success, 1 I/O error, 2 config/parse error, 3 numerical failure.
"""

from __future__ import annotations

import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import typer

from . import __version__
from . import cli_ux
from .config import RunConfig, config_digest, load_config, load_sim_config
from .core.camera import Intrinsics
from .core.dualflow import decompose
from .core.photometric import weighted_total
from .core.providers import make_provider
from .core.update_loop import RunResult, SolverState, run
from .errors import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, ConfigError, DualFlowError
from .evaluation.trajectory import ate_report, load_tum, save_tum, trajectory_from_poses
from .formats import read_flo, read_mask, read_pfm, write_flo, write_mask, write_pfm, write_pgm
from .gradcheck import DEFAULT_INSTANCES, run_gradchecks
from .monitoring.logging import get_solver_logger
from .monitoring.metrics import MetricsCollector, segmentation_metrics
from .sim.world import Scene, generate, gt_flows, gt_masks, perturb, scene_graph


app = typer.Typer(
    name="dualflow-vo",
    help="dualflow-vo - dual-flow dynamic visual odometry backend",
    add_completion=False,
)


class GlobalState:
    """Global state for CLI options."""
    quiet: bool = False
    verbose: bool = False


state = GlobalState()


# ----------------------------
# Run manifest
# ----------------------------
@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs."""
    command: str
    seed: int
    config: Dict[str, Any]
    outputs: Dict[str, List[str]] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    status: str = "ok"
    version: str = __version__

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "config_digest": self.config_digest,
            "outputs": {key: sorted(paths) for key, paths in self.outputs.items()},
            "metrics": self.metrics,
            "status": self.status,
        }

    def missing_outputs(self, out_dir: Path) -> List[str]:
        return [p for paths in self.outputs.values() for p in paths if not (out_dir / p).exists()]

    def save(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _guarded(command: Callable[..., int], *args: Any, **kwargs: Any) -> int:
    """Run a command, mapping exceptions to exit codes and reporting them on stderr."""
    try:
        return command(*args, **kwargs)
    except DualFlowError as e:
        cli_ux.print_error(str(e), e.exit_code)
        if state.verbose:
            traceback.print_exc()
        return e.exit_code
    except OSError as e:
        cli_ux.print_error(str(e), EXIT_IO)
        if state.verbose:
            traceback.print_exc()
        return EXIT_IO


def _show(panel: cli_ux.RichPanel) -> None:
    if not state.quiet:
        panel.print()


# ----------------------------
# simulate
# ----------------------------
def cmd_simulate(config_path: Optional[Path], out_dir: Path, seed: Optional[int] = None) -> int:
    """Render a scene and write images, depths, masks, flows, GT trajectory and manifest."""
    config = load_sim_config(config_path)
    seed = int(config["seed"]) if seed is None else int(seed)
    scene = generate(config, seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    outputs: Dict[str, List[str]] = {"images": [], "depths": [], "masks": [], "flows": [], "trajectory": []}
    for frame in scene.frames:
        t = frame.index
        rel = f"images/frame_{t:04d}.pgm"
        write_pgm(out_dir / rel, frame.image)
        outputs["images"].append(rel)
        rel = f"depths/inv_depth_{t:04d}.pfm"
        write_pfm(out_dir / rel, frame.gt_inv_depth)
        outputs["depths"].append(rel)
        rel = f"masks/mask_{t:04d}.pgm"
        write_pgm(out_dir / rel, (frame.gt_label == 0).astype(np.float64))
        outputs["masks"].append(rel)
    for t in range(scene.n_frames - 1):
        rel = f"flows/flow_{t:04d}_{t + 1:04d}.flo"
        write_flo(out_dir / rel, gt_flows(scene, t, t + 1).optical)
        outputs["flows"].append(rel)

    gt = trajectory_from_poses([f.timestamp for f in scene.frames], [f.gt_pose for f in scene.frames])
    save_tum(out_dir / "groundtruth.txt", gt)
    outputs["trajectory"].append("groundtruth.txt")

    metrics = {
        "n_frames": scene.n_frames,
        "dynamic_fraction": scene.dynamic_fraction(0),
        "intrinsics": scene.intr.to_dict(),
    }
    RunManifest(command="simulate", seed=seed, config=scene.config, outputs=outputs, metrics=metrics).save(out_dir)
    _show(cli_ux.summary_panel("Scene generated", {"out": str(out_dir), "n_frames": scene.n_frames,
                                                    "dynamic_fraction": metrics["dynamic_fraction"]}))
    return EXIT_OK


# ----------------------------
# solve
# ----------------------------
def _load_scene(scene_dir: Path) -> Scene:
    """Regenerate the scene recorded in a simulate manifest."""
    if not scene_dir.is_dir():
        raise FileNotFoundError(f"scene directory not found: {scene_dir}")
    manifest_path = scene_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{manifest_path}: {e.msg}", line=e.lineno, column=e.colno) from e
    if manifest.get("command") != "simulate" or "config" not in manifest:
        raise ConfigError(f"{manifest_path}: not a simulate manifest")
    return generate(manifest["config"], int(manifest["seed"]))


def _write_solve_outputs(out_dir: Path, scene: Scene, result: RunResult, cfg: RunConfig) -> RunManifest:
    outputs: Dict[str, List[str]] = {"trajectory": [], "depths": [], "edges": [], "logs": []}
    graph = result.graph
    ids = graph.frame_ids()

    est = trajectory_from_poses([graph.frames[fid].timestamp for fid in ids], [graph.frames[fid].pose for fid in ids])
    save_tum(out_dir / "trajectory.txt", est)
    outputs["trajectory"].append("trajectory.txt")

    for fid in ids:
        rel = f"depths/inv_depth_{fid:04d}.pfm"
        write_pfm(out_dir / rel, graph.frames[fid].inv_depth)
        outputs["depths"].append(rel)

    for (i, j), flow in result.dynamic_flows().items():
        rel = f"edges/dyn_flow_{i:04d}_{j:04d}.flo"
        write_flo(out_dir / rel, flow)
        outputs["edges"].append(rel)
    for (i, j), flow in result.optical_flows().items():
        rel = f"edges/opt_flow_{i:04d}_{j:04d}.flo"
        write_flo(out_dir / rel, flow)
        outputs["edges"].append(rel)
    for (i, j), mask in result.masks().items():
        rel = f"edges/mask_{i:04d}_{j:04d}.pgm"
        write_mask(out_dir / rel, mask)
        outputs["edges"].append(rel)

    lines = ["iter,cost,max_twist_norm,damping"]
    lines += [f"{r.iter},{r.cost:.17g},{r.max_twist_norm:.17g},{r.damping:.17g}" for r in result.iterations]
    (out_dir / "iterations.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["iter,geo,flow,mask,total"]
    lines += [
        f"{k},{l.geo:.17g},{l.flow:.17g},{l.mask:.17g},{weighted_total(l, cfg.loss):.17g}"
        for k, l in enumerate(result.losses)
    ]
    (out_dir / "losses.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    graph.save_dump(out_dir / "graph.txt")
    get_solver_logger().export(out_dir / "solver_log.jsonl")
    outputs["logs"] += ["iterations.csv", "losses.csv", "graph.txt", "solver_log.jsonl"]

    metrics: Dict[str, Any] = {
        "outer_iterations": len(result.iterations),
        "converged": result.converged,
        "total_loss": result.total_loss,
    }
    gt = trajectory_from_poses([f.timestamp for f in scene.frames], [f.gt_pose for f in scene.frames])
    try:
        report = ate_report(est, gt)
        metrics["ate_rmse"] = report.rmse
        metrics["ate_scale"] = report.alignment.scale
    except DualFlowError as e:
        metrics["ate_error"] = str(e)

    collector = MetricsCollector()
    truth = gt_masks(scene, graph)
    for key, mask in result.masks().items():
        collector.record(f"{key[0]}_{key[1]}", mask.dynamic(), truth[key].dynamic())
    metrics["mask"] = collector.get_summary()
    return RunManifest(command="solve", seed=cfg.seed, config=cfg.to_dict(), outputs=outputs, metrics=metrics)


def cmd_solve(
    scene_dir: Path,
    config_path: Optional[Path],
    out_dir: Path,
    seed: Optional[int] = None,
    provider: Optional[str] = None,
    mu: Optional[float] = None,
    eta: Optional[float] = None,
    radius: Optional[int] = None,
    single_flow: bool = False,
) -> int:
    """
    Solve a simulated scene from a noisy initialization.

    Numerical failures still write the partial state before exiting with 3.
    """
    cfg = RunConfig.from_dict(load_config(config_path)).with_overrides(
        seed=seed, provider=provider, mu=mu, eta=eta, radius=radius,
        single_flow=True if single_flow else None,
    )
    scene = _load_scene(scene_dir)
    graph = perturb(scene_graph(scene, window=cfg.window, n_fixed=cfg.n_fixed),
                    cfg.init_pose_sigma, cfg.init_depth_sigma, seed=cfg.seed)
    noise = cfg.noise_sigma if cfg.noise_sigma > 0 else float(scene.config["noise_sigma"])
    target_provider = make_provider(
        cfg.provider, scene=scene, noise_sigma=noise, seed=cfg.seed, logit=cfg.oracle_logit,
        radius=cfg.radius, feature_dim=cfg.feature_dim,
    )
    supervision = gt_masks(scene, graph) if cfg.mask_supervision == "gt" else None
    solver = SolverState.create(graph, scene.intr, cfg, target_provider, gt_masks=supervision)

    get_solver_logger().clear()
    failure: Optional[DualFlowError] = None
    try:
        result = run(solver)
    except DualFlowError as e:
        if e.partial is None:
            raise
        failure, result = e, e.partial

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _write_solve_outputs(out_dir, scene, result, cfg)
    if failure is not None:
        manifest.status = type(failure).__name__
    manifest.save(out_dir)

    if failure is not None:
        cli_ux.print_error(f"{failure} (partial outputs written to {out_dir})", failure.exit_code)
        return failure.exit_code
    shown = {k: v for k, v in manifest.metrics.items() if k != "mask"}
    shown["mask_iou"] = manifest.metrics["mask"]["iou"]
    _show(cli_ux.summary_panel("Solve complete", shown))
    return EXIT_OK


# ----------------------------
# eval
# ----------------------------
def cmd_eval(est_path: Path, gt_path: Path, no_scale: bool = False) -> int:
    """Print 'ate,ate_x,ate_y,ate_z' as one CSV line."""
    report = ate_report(load_tum(est_path), load_tum(gt_path), with_scale=not no_scale)
    typer.echo(report.csv_line())
    return EXIT_OK


# ----------------------------
# decompose
# ----------------------------
def _parse_intrinsics(text: Optional[str], height: int, width: int) -> Intrinsics:
    if text is None:
        return Intrinsics.from_fov(width, height)
    try:
        fx, fy, cx, cy = (float(v) for v in text.split(","))
        return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    except ValueError as e:
        raise ConfigError(f"--intrinsics expects 'fx,fy,cx,cy': {e}") from e


def cmd_decompose(
    flow_path: Path,
    traj_path: Path,
    depth_path: Path,
    out_dir: Path,
    mu: float = 0.5,
    intrinsics: Optional[str] = None,
    i: int = 0,
    j: int = 1,
    gt_mask_path: Optional[Path] = None,
) -> int:
    """Write static.flo, dynamic.flo and mask.pgm; report IoU against a GT mask if given."""
    f_o = read_flo(flow_path)
    traj = load_tum(traj_path)
    d_i = read_pfm(depth_path)
    height, width = f_o.shape
    intr = _parse_intrinsics(intrinsics, height, width)
    if not (0 <= i < len(traj) and 0 <= j < len(traj)):
        raise ConfigError(f"frame indices ({i}, {j}) outside trajectory of {len(traj)} poses")
    # TUM poses are camera-to-world
    g_i = traj.entries[i][1].inverse()
    g_j = traj.entries[j][1].inverse()
    result = decompose(intr, g_i, g_j, d_i, f_o, mu)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_flo(out_dir / "static.flo", result.static)
    write_flo(out_dir / "dynamic.flo", result.dynamic)
    write_mask(out_dir / "mask.pgm", result.mask)

    summary: Dict[str, Any] = {"dynamic_pixels": int(result.mask.dynamic().sum()), "mu": mu}
    if gt_mask_path is not None:
        gt = read_mask(gt_mask_path)
        metrics = segmentation_metrics(result.mask.dynamic(), gt.dynamic(), valid=f_o.valid, name="decompose")
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8",
        )
        summary.update(metrics.to_dict())
        typer.echo(f"iou,{metrics.iou:.6f}")
    _show(cli_ux.summary_panel("Flow decomposition", summary))
    return EXIT_OK


# ----------------------------
# gradcheck
# ----------------------------
def cmd_gradcheck(seed: int = 0, instances: int = DEFAULT_INSTANCES, break_jacobian: bool = False) -> int:
    """Exit 0 iff every check is below tolerance."""
    results = run_gradchecks(seed=seed, instances=instances, break_jacobian=break_jacobian)
    for r in results:
        typer.echo(f"{r.name},{r.max_rel_error:.3e},{'PASS' if r.passed else 'FAIL'}")
    if not state.quiet:
        cli_ux.checks_table(results).print(cli_ux.get_error_console())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


# ----------------------------
# Typer commands
# ----------------------------
@app.callback()
def main_callback(
    quiet: bool = typer.Option(False, "-q", "--quiet", help="Suppress non-error output"),
    verbose: bool = typer.Option(False, "-v", "--verbose", help="Print tracebacks on errors"),
):
    """dualflow-vo - dual-flow dynamic visual odometry backend."""
    state.quiet = quiet
    state.verbose = verbose


@app.command()
def simulate(
    config: Optional[Path] = typer.Option(None, "--config", help="Simulator config (JSON)"),
    out: Path = typer.Option(Path("scene"), "--out", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
):
    """Render a synthetic scene with ground truth."""
    raise typer.Exit(_guarded(cmd_simulate, config, out, seed))


@app.command()
def solve(
    scene_dir: Path = typer.Argument(..., help="Directory written by 'simulate'"),
    config: Optional[Path] = typer.Option(None, "--config", help="Run config (JSON)"),
    out: Path = typer.Option(Path("run"), "--out", help="Output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    provider: Optional[str] = typer.Option(None, "--provider", help="oracle or correlation"),
    mu: Optional[float] = typer.Option(None, "--mu", help="Mask threshold in pixels"),
    eta: Optional[float] = typer.Option(None, "--eta", help="Confidence mask weight"),
    radius: Optional[int] = typer.Option(None, "--radius", help="Correlation search radius"),
    single_flow: bool = typer.Option(False, "--single-flow", help="Single-flow baseline"),
):
    """Run the dual-flow update loop on a simulated scene."""
    raise typer.Exit(_guarded(
        cmd_solve, scene_dir, config, out, seed=seed, provider=provider, mu=mu, eta=eta,
        radius=radius, single_flow=single_flow,
    ))


@app.command(name="eval")
def eval_cmd(
    est: Path = typer.Argument(..., help="Estimated TUM trajectory"),
    gt: Path = typer.Argument(..., help="Ground-truth TUM trajectory"),
    no_scale: bool = typer.Option(False, "--no-scale", help="SE(3) alignment instead of Sim(3)"),
):
    """Print ATE as a CSV line: ate,ate_x,ate_y,ate_z."""
    raise typer.Exit(_guarded(cmd_eval, est, gt, no_scale))


@app.command(name="decompose")
def decompose_cmd(
    flow: Path = typer.Argument(..., help="Optical flow (.flo) from frame i to frame j"),
    traj: Path = typer.Argument(..., help="TUM trajectory containing frames i and j"),
    depth: Path = typer.Argument(..., help="Inverse depth of frame i (.pfm)"),
    out: Path = typer.Option(Path("decomposed"), "--out", help="Output directory"),
    mu: float = typer.Option(0.5, "--mu", help="Dynamic threshold in pixels"),
    intrinsics: Optional[str] = typer.Option(None, "--intrinsics", help="fx,fy,cx,cy (default: 60 deg FOV)"),
    i: int = typer.Option(0, "--i", help="Source pose index in the trajectory"),
    j: int = typer.Option(1, "--j", help="Target pose index in the trajectory"),
    gt_mask: Optional[Path] = typer.Option(None, "--gt-mask", help="Ground-truth mask (.pgm, 255 = static)"),
):
    """Split an optical flow into static and dynamic parts."""
    raise typer.Exit(_guarded(
        cmd_decompose, flow, traj, depth, out, mu=mu, intrinsics=intrinsics, i=i, j=j, gt_mask_path=gt_mask,
    ))


@app.command()
def gradcheck(
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    instances: int = typer.Option(DEFAULT_INSTANCES, "--instances", help="Random instances per check"),
    break_jacobian: bool = typer.Option(False, "--break-jacobian", hidden=True),
):
    """Finite-difference checks of every analytic derivative."""
    raise typer.Exit(_guarded(cmd_gradcheck, seed, instances, break_jacobian))


def main():
    """Main entry point."""
    try:
        app()
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
