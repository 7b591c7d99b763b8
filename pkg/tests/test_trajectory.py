"""Tests for trajectory alignment, ATE and TUM I/O."""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from dualflow_vo.core.se3 import PoseSE3, exp, random_twist
from dualflow_vo.errors import ParseError, TooFewCorrespondences
from dualflow_vo.evaluation.trajectory import (
    Trajectory,
    associate,
    ate_report,
    ate_rmse,
    load_tum,
    save_tum,
    trajectory_from_poses,
    umeyama_align,
)
from dualflow_vo.monitoring.logging import get_solver_logger


def _curved_trajectory(n=8, seed=0):
    """Camera-to-world poses on a non-collinear path."""
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n):
        t = np.array([np.cos(0.4 * k), 0.3 * k, np.sin(0.4 * k)])
        rot = exp(random_twist(rng, 0.2)).rotation
        entries.append((0.1 * k, PoseSE3(rotation=rot, translation=t)))
    return Trajectory(entries)


def test_identical_trajectories_align_to_identity():
    traj = _curved_trajectory()
    alignment = umeyama_align(traj, traj)
    assert alignment.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(alignment.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(alignment.translation, 0.0, atol=1e-9)
    assert ate_rmse(traj, traj) < 1e-12


def test_scaled_copy_recovers_scale():
    gt = _curved_trajectory()
    est = gt.transformed(0.5, PoseSE3.identity())
    alignment = umeyama_align(est, gt)
    assert alignment.scale == pytest.approx(2.0, rel=1e-9)
    assert ate_rmse(est, gt) < 1e-9


def test_random_similarity_is_removed():
    gt = _curved_trajectory(seed=1)
    rng = np.random.default_rng(7)
    pose = exp(random_twist(rng, 1.0))
    est = gt.transformed(3.7, pose)
    assert ate_rmse(est, gt) < 1e-9


def test_constant_offset_is_removed():
    gt = _curved_trajectory()
    est = gt.transformed(1.0, PoseSE3(translation=np.array([5.0, -2.0, 1.0])))
    report = ate_report(est, gt, with_scale=False)
    assert report.rmse < 1e-9
    assert report.n_pairs == len(gt)


def test_without_scale_keeps_unit_scale():
    gt = _curved_trajectory()
    est = gt.transformed(0.5, PoseSE3.identity())
    report = ate_report(est, gt, with_scale=False)
    assert report.alignment.scale == 1.0
    assert report.rmse > 0.1


def test_ate_with_noise_is_optimal():
    """No perturbation of the fitted similarity lowers the RMSE."""
    gt = _curved_trajectory(n=20, seed=2)
    rng = np.random.default_rng(3)
    noisy = Trajectory([
        (t, PoseSE3(rotation=g.rotation, translation=g.translation + rng.normal(0.0, 0.05, 3)))
        for t, g in gt.entries
    ])
    report = ate_report(noisy, gt)
    assert 0.0 < report.rmse < 0.2
    p_est, p_gt = noisy.positions(), gt.positions()
    best = report.alignment
    for _ in range(50):
        nudge = exp(random_twist(rng, 1e-3))
        scale = best.scale * (1.0 + rng.normal(0.0, 1e-3))
        moved = scale * p_est @ (nudge.R @ best.R).T + best.translation + nudge.translation
        rmse = np.sqrt(np.mean(np.sum((moved - p_gt) ** 2, axis=1)))
        assert rmse >= report.rmse - 1e-12


def test_per_axis_rmse_combines_to_total():
    gt = _curved_trajectory(n=12)
    rng = np.random.default_rng(4)
    noisy = Trajectory([
        (t, PoseSE3(rotation=g.rotation, translation=g.translation + rng.normal(0.0, 0.02, 3)))
        for t, g in gt.entries
    ])
    report = ate_report(noisy, gt)
    x, y, z = report.rmse_xyz
    assert np.sqrt(x ** 2 + y ** 2 + z ** 2) == pytest.approx(report.rmse, rel=1e-12)
    assert len(report.csv_line().split(",")) == 4


def test_collinear_estimate_falls_back_to_rigid_alignment():
    get_solver_logger().clear()
    line = Trajectory([(0.1 * k, PoseSE3(translation=np.array([0.1 * k, 0.0, 0.0]))) for k in range(5)])
    alignment = umeyama_align(line, line)
    assert alignment.scale == 1.0
    assert get_solver_logger().get_logs_by_event("alignment_fallback")


def test_too_few_pairs_raise():
    gt = _curved_trajectory(n=2)
    with pytest.raises(TooFewCorrespondences):
        ate_rmse(gt, gt)


def test_association_uses_nearest_timestamps():
    gt = _curved_trajectory(n=5)
    shifted = Trajectory([(t + 0.01, g) for t, g in gt.entries])
    assert associate(shifted, gt) == [(k, k) for k in range(5)]
    far = Trajectory([(t + 0.05, g) for t, g in gt.entries])
    assert associate(far, gt) == []


def test_timestamps_must_increase():
    with pytest.raises(ValueError):
        Trajectory([(0.2, PoseSE3.identity()), (0.1, PoseSE3.identity())])


def test_trajectory_from_poses_inverts_world_to_camera():
    g = PoseSE3(translation=np.array([1.0, 2.0, 3.0]))
    traj = trajectory_from_poses([0.0], [g])
    np.testing.assert_allclose(traj.positions()[0], [-1.0, -2.0, -3.0])


class TestTumFiles(unittest.TestCase):
    """Test TUM text trajectory files."""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def _write(self, text):
        path = self.test_dir / "traj.txt"
        path.write_text(text, encoding="utf-8")
        return path

    def test_save_and_load(self):
        traj = _curved_trajectory()
        path = self.test_dir / "out" / "traj.txt"
        save_tum(path, traj)
        loaded = load_tum(path)
        self.assertEqual(len(loaded), len(traj))
        np.testing.assert_allclose(loaded.timestamps, traj.timestamps)
        np.testing.assert_allclose(loaded.positions(), traj.positions())
        self.assertLess(ate_rmse(loaded, traj), 1e-12)

    def test_comments_and_blank_lines_skipped(self):
        path = self._write("# only a header\n\n# and another\n")
        self.assertEqual(len(load_tum(path)), 0)

    def test_quaternion_is_normalized_within_tolerance(self):
        path = self._write("0.0 1 2 3 0 0 0 1.0005\n")
        loaded = load_tum(path)
        self.assertAlmostEqual(float(np.linalg.norm(loaded.entries[0][1].rotation)), 1.0, places=12)

    def test_bad_quaternion_reports_line(self):
        path = self._write("# header\n0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 2\n")
        with self.assertRaises(ParseError) as ctx:
            load_tum(path)
        self.assertEqual(ctx.exception.line_number, 3)

    def test_wrong_field_count(self):
        path = self._write("0.0 0 0 0 0 0 1\n")
        with self.assertRaises(ParseError) as ctx:
            load_tum(path)
        self.assertEqual(ctx.exception.line_number, 1)

    def test_non_numeric_field(self):
        path = self._write("0.0 0 0 x 0 0 0 1\n")
        with self.assertRaises(ParseError):
            load_tum(path)

    def test_decreasing_timestamps(self):
        path = self._write("0.2 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n")
        with self.assertRaises(ParseError) as ctx:
            load_tum(path)
        self.assertEqual(ctx.exception.line_number, 2)
