"""
dualflow-vo Evaluation: Trajectories

Trajectory container, TUM text I/O, timestamp association, Umeyama
Sim(3)/SE(3) alignment and absolute trajectory error.

Trajectories store camera-to-world poses (TUM convention); solver poses
are world-to-camera and are inverted by `trajectory_from_poses`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..core.se3 import PoseSE3
from ..errors import DegenerateGeometry, ParseError, TooFewCorrespondences
from ..monitoring.logging import get_solver_logger


ASSOCIATION_WINDOW = 0.02
QUAT_NORM_TOL = 1e-3
COLLINEAR_TOL = 1e-9
MIN_PAIRS = 3


@dataclass
class Trajectory:
    """Ordered (timestamp, camera-to-world pose) entries."""
    entries: List[Tuple[float, PoseSE3]] = field(default_factory=list)

    def __post_init__(self):
        stamps = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries], dtype=np.float64)

    def positions(self) -> np.ndarray:
        """Camera centers, shape (N, 3)."""
        if not self.entries:
            return np.zeros((0, 3))
        return np.stack([pose.translation for _, pose in self.entries])

    def transformed(self, scale: float, pose: PoseSE3) -> Trajectory:
        """Apply x -> s R x + t to every camera center (rotations are left-composed)."""
        out = []
        for t, g in self.entries:
            out.append((t, PoseSE3(
                rotation=pose.compose(PoseSE3(rotation=g.rotation)).rotation,
                translation=scale * (pose.R @ g.translation) + pose.translation,
            )))
        return Trajectory(out)


@dataclass
class Sim3Alignment:
    """x_gt ~ scale * R x_est + t."""
    scale: float
    rotation: np.ndarray  # quaternion (x, y, z, w)
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("alignment scale must be positive")

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.R.T + self.translation


@dataclass
class AteReport:
    rmse: float
    rmse_xyz: Tuple[float, float, float]
    n_pairs: int
    alignment: Sim3Alignment
    with_scale: bool

    def csv_line(self) -> str:
        x, y, z = self.rmse_xyz
        return f"{self.rmse:.6f},{x:.6f},{y:.6f},{z:.6f}"


def trajectory_from_poses(timestamps: Sequence[float], poses: Iterable[PoseSE3]) -> Trajectory:
    """Build a TUM-convention trajectory from world-to-camera poses."""
    return Trajectory([(float(t), g.inverse()) for t, g in zip(timestamps, poses)])


def associate(
    est: Trajectory,
    gt: Trajectory,
    max_diff: float = ASSOCIATION_WINDOW,
) -> List[Tuple[int, int]]:
    """
    Greedy nearest-timestamp matching within max_diff; each entry is used once.

    Returns:
        (est index, gt index) pairs sorted by est index
    """
    ts_e, ts_g = est.timestamps, gt.timestamps
    candidates = []
    for a, ta in enumerate(ts_e):
        for b, tb in enumerate(ts_g):
            diff = abs(ta - tb)
            if diff <= max_diff:
                candidates.append((diff, a, b))
    candidates.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, a, b in candidates:
        if a in used_e or b in used_g:
            continue
        used_e.add(a)
        used_g.add(b)
        pairs.append((a, b))
    return sorted(pairs)


def _matched_positions(est: Trajectory, gt: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    pairs = associate(est, gt)
    if len(pairs) < MIN_PAIRS:
        raise TooFewCorrespondences(f"need {MIN_PAIRS} associated poses, got {len(pairs)}")
    p_est = est.positions()[[a for a, _ in pairs]]
    p_gt = gt.positions()[[b for _, b in pairs]]
    if not (np.all(np.isfinite(p_est)) and np.all(np.isfinite(p_gt))):
        raise DegenerateGeometry("trajectory contains non-finite positions")
    return p_est, p_gt


def _is_collinear(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[0] < COLLINEAR_TOL or sv[1] <= COLLINEAR_TOL * sv[0]


def umeyama(p_est: np.ndarray, p_gt: np.ndarray, with_scale: bool) -> Sim3Alignment:
    """Closed-form least-squares alignment of point sets (N, 3)."""
    n = p_est.shape[0]
    mu_e = p_est.mean(axis=0)
    mu_g = p_gt.mean(axis=0)
    e0 = p_est - mu_e
    g0 = p_gt - mu_g

    C = g0.T @ e0 / n
    sigma2 = float((e0 ** 2).sum() / n)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / sigma2) if (with_scale and sigma2 > 0) else 1.0
    if not scale > 0:
        scale = 1.0
    t = mu_g - scale * R @ mu_e
    return Sim3Alignment(scale=scale, rotation=Rotation.from_matrix(R).as_quat(), translation=t)


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> Sim3Alignment:
    """
    Sim(3) (or SE(3)) alignment of associated camera centers.

    Collinear or coincident estimated centers leave the scale unobservable;
    the fit then falls back to SE(3) and logs an `alignment_fallback` event.

    Raises:
        TooFewCorrespondences: if fewer than 3 timestamps associate
    """
    p_est, p_gt = _matched_positions(est, gt)
    if with_scale and _is_collinear(p_est):
        get_solver_logger().log_event(
            "alignment_fallback", message="collinear camera centers, aligning without scale",
            n_pairs=len(p_est),
        )
        with_scale = False
    return umeyama(p_est, p_gt, with_scale)


def ate_report(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> AteReport:
    """ATE RMSE and per-axis RMSE after alignment."""
    p_est, p_gt = _matched_positions(est, gt)
    alignment = umeyama_align(est, gt, with_scale)
    err = alignment.apply(p_est) - p_gt
    rmse = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
    per_axis = np.sqrt(np.mean(err ** 2, axis=0))
    return AteReport(
        rmse=rmse,
        rmse_xyz=(float(per_axis[0]), float(per_axis[1]), float(per_axis[2])),
        n_pairs=len(p_est),
        alignment=alignment,
        with_scale=with_scale,
    )


def ate_rmse(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> float:
    return ate_report(est, gt, with_scale).rmse


def save_tum(path: Path, traj: Trajectory) -> None:
    """Write 'timestamp tx ty tz qx qy qz qw' lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in traj.entries:
        values = [t, *pose.translation, *pose.rotation]
        lines.append(" ".join(format(float(v), ".17g") for v in values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tum(path: Path) -> Trajectory:
    """
    Read a TUM trajectory; '#' lines and blank lines are skipped.

    Raises:
        ParseError: with the 1-based line number of the offending line
    """
    entries: List[Tuple[float, PoseSE3]] = []
    text = path.read_text(encoding="utf-8")
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, got {len(fields)}", line_number, str(path))
        try:
            values = [float(v) for v in fields]
        except ValueError as e:
            raise ParseError(f"non-numeric field: {e}", line_number, str(path)) from e
        if not np.all(np.isfinite(values)):
            raise ParseError("non-finite value", line_number, str(path))
        quat = np.array(values[4:8])
        norm = float(np.linalg.norm(quat))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise ParseError(f"quaternion norm {norm:.6f} is not 1", line_number, str(path))
        if entries and values[0] <= entries[-1][0]:
            raise ParseError("timestamps must be strictly increasing", line_number, str(path))
        entries.append((values[0], PoseSE3(rotation=quat / norm, translation=np.array(values[1:4]))))
    return Trajectory(entries)
