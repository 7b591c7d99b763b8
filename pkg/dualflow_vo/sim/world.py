"""
dualflow-vo Simulator: Rigid-Motion Scene Oracle

Deterministic synthetic scenes: a textured background plane plus textured
rectangles moving rigidly, seen by a camera on a parametric trajectory.
Images are rendered by ray casting and sampling an analytic texture, so
co-visible pixels are photometrically consistent up to float round-off.
Ground-truth static/dynamic/optical flows satisfy F_o = F_s + F_d bit-exact.

World coordinates coincide with the first camera frame. Poses are
world-to-camera.

The config key `noise_sigma` (pixels) is the standard deviation of the
Gaussian noise the oracle target provider adds to flow measurements of this
scene. Rendered images stay noise-free.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import get_default_sim_config, validate_sim_config
from ..core.camera import Intrinsics, PixelGrid, reproject
from ..core.dualflow import DynamicMask, FlowField
from ..core.framegraph import Frame, FrameGraph
from ..core.se3 import PoseSE3, Twist, exp, random_twist, relative, retract
from ..errors import ConfigError, DegenerateConfig


N_SINUSOIDS = 6
FREQ_RANGE = (2.0, 12.0)
DEPTH_EPS = 1e-6
BACKGROUND = 0


@dataclass
class Texture:
    """Sum of random-phase sinusoids per surface axis, values in [0, 1]."""
    freq_a: np.ndarray
    phase_a: np.ndarray
    freq_b: np.ndarray
    phase_b: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator) -> Texture:
        lo, hi = FREQ_RANGE
        return cls(
            freq_a=rng.uniform(lo, hi, N_SINUSOIDS),
            phase_a=rng.uniform(0.0, 2 * np.pi, N_SINUSOIDS),
            freq_b=rng.uniform(lo, hi, N_SINUSOIDS),
            phase_b=rng.uniform(0.0, 2 * np.pi, N_SINUSOIDS),
        )

    def sample(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sa = np.sin(a[..., None] * self.freq_a + self.phase_a).sum(axis=-1)
        sb = np.sin(b[..., None] * self.freq_b + self.phase_b).sum(axis=-1)
        return 0.5 + (sa + sb) / (4.0 * N_SINUSOIDS)


@dataclass
class Surface:
    """
    Planar textured patch in its own frame: the local z = 0 plane, facing -z.

    `pose_at(t)` maps surface coordinates to world coordinates at frame t.
    Unbounded surfaces (half_extents None) model the background.
    """
    label: int
    origin: PoseSE3
    twist: Twist
    half_extents: Optional[Tuple[float, float]]
    texture: Texture

    def pose_at(self, t: int) -> PoseSE3:
        return self.origin.compose(exp(Twist.from_vector(t * self.twist.as_vector())))


@dataclass
class SimFrame:
    """Rendered frame with ground truth."""
    index: int
    timestamp: float
    image: np.ndarray
    gt_pose: PoseSE3
    gt_inv_depth: np.ndarray
    gt_label: np.ndarray


@dataclass
class Scene:
    config: Dict[str, Any]
    seed: int
    intr: Intrinsics
    surfaces: List[Surface]
    frames: List[SimFrame]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def dynamic_fraction(self, index: int = 0) -> float:
        return float(np.mean(self.frames[index].gt_label != BACKGROUND))


@dataclass
class GTFlows:
    """Ground-truth flows of pair (i, j) on frame i's grid."""
    static: FlowField
    dynamic: FlowField
    optical: FlowField
    mask: DynamicMask
    occlusion: np.ndarray


@dataclass
class _Hit:
    depth: np.ndarray  # camera-frame Z
    label: np.ndarray
    a: np.ndarray
    b: np.ndarray


def intrinsics_from_config(config: Dict[str, Any]) -> Intrinsics:
    width, height = int(config["width"]), int(config["height"])
    intr = config.get("intrinsics")
    if intr is None:
        return Intrinsics.from_fov(width, height)
    return Intrinsics(
        fx=float(intr["fx"]), fy=float(intr["fy"]), cx=float(intr["cx"]), cy=float(intr["cy"]),
        width=width, height=height,
    )


def camera_pose(config: Dict[str, Any], t: int) -> PoseSE3:
    """World-to-camera pose of frame t; frame 0 is the identity."""
    traj = config["trajectory"]
    speed = float(traj["speed"])
    direction = np.asarray(traj.get("direction", [1.0, 0.0, 0.0]), dtype=np.float64)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    radius = float(traj.get("radius", 2.0))
    kind = traj["kind"]
    if kind == "line":
        cam_to_world = exp(Twist(omega=np.zeros(3), v=t * speed * direction))
    elif kind == "arc":
        yaw_rate = speed / radius
        cam_to_world = exp(Twist(omega=np.array([0.0, t * yaw_rate, 0.0]), v=t * speed * direction))
    elif kind == "orbit":
        # rotate about a point `radius` ahead of the first camera
        theta = t * speed / radius
        pivot = PoseSE3(translation=np.array([0.0, 0.0, radius]))
        spin = exp(Twist(omega=np.array([0.0, theta, 0.0]), v=np.zeros(3)))
        cam_to_world = pivot.compose(spin).compose(pivot.inverse())
    else:
        raise DegenerateConfig(f"unknown trajectory kind {kind!r}")
    return cam_to_world.inverse()


def _background_surface(config: Dict[str, Any], texture: Texture) -> Surface:
    bg = config["background"]
    normal = np.asarray(bg.get("normal", [0.0, 0.0, -1.0]), dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    # local -z is the facing direction
    z_axis = -normal
    helper = np.array([0.0, 1.0, 0.0]) if abs(z_axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x_axis = np.cross(helper, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis], axis=1)
    origin = PoseSE3.from_rt(R, np.array([0.0, 0.0, float(bg["depth"])]))
    return Surface(label=BACKGROUND, origin=origin, twist=Twist.zero(), half_extents=None, texture=texture)


def _build_surfaces(config: Dict[str, Any], rng: np.random.Generator) -> List[Surface]:
    surfaces = [_background_surface(config, Texture.random(rng))]
    for idx, obj in enumerate(config["objects"]):
        surfaces.append(Surface(
            label=idx + 1,
            origin=PoseSE3(translation=np.asarray(obj["center"], dtype=np.float64)),
            twist=Twist.from_vector(obj["twist"]),
            half_extents=(float(obj["half_extents"][0]), float(obj["half_extents"][1])),
            texture=Texture.random(rng),
        ))
    return surfaces


def _rays(intr: Intrinsics, coords: np.ndarray) -> np.ndarray:
    return np.stack([
        (coords[..., 0] - intr.cx) / intr.fx,
        (coords[..., 1] - intr.cy) / intr.fy,
        np.ones(coords.shape[:-1]),
    ], axis=-1)


def _cast(surfaces: Sequence[Surface], intr: Intrinsics, pose: PoseSE3, t: int, coords: np.ndarray) -> _Hit:
    """
    Z-buffered ray cast from camera `pose` at frame t through pixel coords.

    Camera rays have unit z in the camera frame, so the ray parameter equals
    the camera-frame depth of the hit.
    """
    shape = coords.shape[:-1]
    rays_cam = _rays(intr, coords)
    cam_to_world = pose.inverse()
    best = _Hit(
        depth=np.full(shape, np.inf),
        label=np.full(shape, -1, dtype=int),
        a=np.zeros(shape),
        b=np.zeros(shape),
    )
    for surface in surfaces:
        world_to_local = surface.pose_at(t).inverse()
        cam_to_local = world_to_local.compose(cam_to_world)
        origin = cam_to_local.translation
        dirs = rays_cam @ cam_to_local.R.T
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -origin[2] / dirs[..., 2]
        a = origin[0] + s * dirs[..., 0]
        b = origin[1] + s * dirs[..., 1]
        hit = np.isfinite(s) & (s > 0)
        if surface.half_extents is not None:
            hx, hy = surface.half_extents
            hit &= (np.abs(a) <= hx) & (np.abs(b) <= hy)
        closer = hit & (s < best.depth)
        best.depth = np.where(closer, s, best.depth)
        best.label = np.where(closer, surface.label, best.label)
        best.a = np.where(closer, a, best.a)
        best.b = np.where(closer, b, best.b)
    return best


def _shade(surfaces: Sequence[Surface], hit: _Hit) -> np.ndarray:
    image = np.zeros(hit.depth.shape)
    for surface in surfaces:
        sel = hit.label == surface.label
        if sel.any():
            image[sel] = surface.texture.sample(hit.a[sel], hit.b[sel])
    return image


def generate(config: Optional[Dict[str, Any]] = None, seed: int = 0) -> Scene:
    """
    Deterministic scene for (config, seed).

    Raises:
        DegenerateConfig: if a pixel sees no surface, or an object is behind
            the camera in every frame
    """
    config = validate_sim_config(copy.deepcopy(config) if config is not None else get_default_sim_config())
    intr = intrinsics_from_config(config)
    rng = np.random.default_rng([int(seed), int(config["texture_seed"])])
    surfaces = _build_surfaces(config, rng)
    n_frames = int(config["n_frames"])
    poses = [camera_pose(config, t) for t in range(n_frames)]

    for surface in surfaces[1:]:
        depths = [pose.act(surface.pose_at(t).translation)[2] for t, pose in enumerate(poses)]
        if max(depths) <= 0:
            raise DegenerateConfig(f"object {surface.label} is behind the camera in every frame")

    grid = PixelGrid.for_intrinsics(intr)
    frames = []
    for t, pose in enumerate(poses):
        hit = _cast(surfaces, intr, pose, t, grid.coords)
        if (hit.label < 0).any():
            raise DegenerateConfig(f"frame {t}: {int((hit.label < 0).sum())} pixels see no surface")
        frames.append(SimFrame(
            index=t,
            timestamp=t * float(config["frame_interval"]),
            image=_shade(surfaces, hit),
            gt_pose=pose,
            gt_inv_depth=1.0 / hit.depth,
            gt_label=hit.label,
        ))
    return Scene(config=config, seed=int(seed), intr=intr, surfaces=surfaces, frames=frames)


def render_at(scene: Scene, index: int, coords: np.ndarray) -> np.ndarray:
    """Exact texture value seen by frame `index` at continuous pixel coords (..., 2)."""
    frame = scene.frames[index]
    hit = _cast(scene.surfaces, scene.intr, frame.gt_pose, index, np.asarray(coords, dtype=np.float64))
    image = _shade(scene.surfaces, hit)
    return np.where(hit.label >= 0, image, np.nan)


def _surface_by_label(scene: Scene) -> Dict[int, Surface]:
    return {s.label: s for s in scene.surfaces}


def gt_flows(scene: Scene, i: int, j: int) -> GTFlows:
    """
    Ground-truth flows from frame i to frame j.

    F_s comes from the relative camera pose and GT inverse depth; F_d is the
    extra image motion of points on moving surfaces (exactly zero on the
    background); F_o is F_s + F_d.
    """
    fi, fj = scene.frames[i], scene.frames[j]
    intr = scene.intr
    grid = PixelGrid.for_intrinsics(intr)
    shape = grid.shape

    static_corr = reproject(intr, relative(fi.gt_pose, fj.gt_pose), fi.gt_inv_depth, grid)
    f_s = FlowField.between(static_corr, grid)

    # camera-frame points of frame i, moved with their surface to time j
    pts_cam_i = _rays(intr, grid.coords) / fi.gt_inv_depth[..., None]
    pts_world = fi.gt_pose.inverse().act(pts_cam_i)
    moved = pts_world.copy()
    surfaces = _surface_by_label(scene)
    for label in np.unique(fi.gt_label):
        if label == BACKGROUND:
            continue
        sel = fi.gt_label == label
        motion = surfaces[int(label)].pose_at(j).compose(surfaces[int(label)].pose_at(i).inverse())
        moved[sel] = motion.act(pts_world[sel])
    pts_cam_j = fj.gt_pose.act(moved)
    Z = pts_cam_j[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.stack([intr.fx * pts_cam_j[..., 0] / Z + intr.cx, intr.fy * pts_cam_j[..., 1] / Z + intr.cy], axis=-1)
    in_view = (Z > 0) & np.isfinite(proj).all(axis=-1)
    in_view &= (proj[..., 0] >= 0) & (proj[..., 0] <= intr.width - 1)
    in_view &= (proj[..., 1] >= 0) & (proj[..., 1] <= intr.height - 1)

    dynamic_px = fi.gt_label != BACKGROUND
    valid = static_corr.valid & in_view
    with np.errstate(invalid="ignore"):
        raw = proj - static_corr.coords
    du = np.where(dynamic_px & valid, raw[..., 0], 0.0)
    dv = np.where(dynamic_px & valid, raw[..., 1], 0.0)
    f_d = FlowField(du=du, dv=dv, valid=valid.copy())
    f_o = FlowField(du=f_s.du + f_d.du, dv=f_s.dv + f_d.dv, valid=valid.copy())

    occlusion = np.zeros(shape, dtype=bool)
    if in_view.any():
        hit = _cast(scene.surfaces, intr, fj.gt_pose, j, np.where(in_view[..., None], proj, 0.0))
        hidden = (Z > hit.depth * (1 + DEPTH_EPS) + DEPTH_EPS) | (hit.label != fi.gt_label)
        occlusion = in_view & hidden

    mask = DynamicMask(values=(~dynamic_px).astype(np.float64))
    return GTFlows(static=f_s, dynamic=f_d, optical=f_o, mask=mask, occlusion=occlusion)


def scene_frames(scene: Scene, images: bool = True) -> List[Frame]:
    """Frame-graph frames at ground-truth pose and inverse depth."""
    return [
        Frame(
            id=f.index,
            timestamp=f.timestamp,
            image=f.image.copy() if images else None,
            pose=f.gt_pose,
            inv_depth=f.gt_inv_depth.copy(),
        )
        for f in scene.frames
    ]


def scene_graph(scene: Scene, window: int = 3, n_fixed: int = 2) -> FrameGraph:
    return FrameGraph.from_frames(scene_frames(scene), window=window, n_fixed=n_fixed)


def gt_masks(scene: Scene, graph: FrameGraph) -> Dict[Tuple[int, int], DynamicMask]:
    """Ground-truth dynamic mask of every edge (the source frame's labels)."""
    return {
        edge.key: DynamicMask(values=(scene.frames[edge.i].gt_label == BACKGROUND).astype(np.float64))
        for edge in graph.sorted_edges()
    }


def perturb(graph: FrameGraph, pose_sigma: float, depth_sigma: float, seed: int = 0) -> FrameGraph:
    """
    Noisy initialization: free poses get a random twist of norm pose_sigma
    (left retraction) and free depths are scaled by (1 + N(0, depth_sigma)).
    Fixed frames are untouched.
    """
    if pose_sigma < 0 or depth_sigma < 0:
        raise ConfigError("sigmas must be non-negative")
    noisy = graph.snapshot()
    rng = np.random.default_rng(seed)
    for fid in noisy.free_ids():
        frame = noisy.frames[fid]
        twist = random_twist(rng, pose_sigma)
        scale = 1.0 + rng.normal(0.0, depth_sigma, size=frame.inv_depth.shape)
        if pose_sigma > 0:
            noisy.set_pose(fid, retract(frame.pose, twist))
        if depth_sigma > 0:
            noisy.set_inv_depth(fid, frame.inv_depth * np.maximum(scale, 0.1))
    return noisy


def mover_config(
    seed: int,
    dynamic_fraction: float = 0.3,
    width: int = 64,
    height: int = 48,
    n_frames: int = 6,
    object_depth: float = 2.5,
    object_speed: float = 0.1,
) -> Dict[str, Any]:
    """
    Config with one fronto-parallel mover covering roughly `dynamic_fraction`
    of the first frame, moving sideways at `object_speed` per frame.
    """
    rng = np.random.default_rng(seed)
    config = get_default_sim_config()
    config.update({"width": width, "height": height, "n_frames": n_frames, "texture_seed": int(seed)})
    intr = Intrinsics.from_fov(width, height)
    area_px = dynamic_fraction * width * height
    aspect = rng.uniform(0.8, 1.25)
    h_px = np.sqrt(area_px / aspect)
    w_px = aspect * h_px
    hx = 0.5 * w_px * object_depth / intr.fx
    hy = 0.5 * h_px * object_depth / intr.fy
    offset_x = rng.uniform(-0.1, 0.1) * object_depth
    offset_y = rng.uniform(-0.1, 0.1) * object_depth
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    config["objects"] = [{
        "center": [offset_x, offset_y, object_depth],
        "half_extents": [hx, hy],
        "twist": [0.0, 0.0, 0.0, sign * object_speed, 0.0, 0.0],
    }]
    return config
