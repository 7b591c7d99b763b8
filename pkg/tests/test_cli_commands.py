"""
CLI Command Tests

End-to-end runs of the simulate / solve / eval / decompose / gradcheck
commands through the Typer app.
"""

import json
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

from typer.testing import CliRunner

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from dualflow_vo.cli import app  # noqa: E402
from dualflow_vo.config import get_default_config, save_config  # noqa: E402
from dualflow_vo.sim.world import mover_config  # noqa: E402


def _csv_values(output):
    """Numbers of the single 4-field CSV line in the output."""
    lines = [line for line in output.splitlines() if line.count(",") == 3]
    assert len(lines) == 1, output
    return [float(v) for v in lines[0].split(",")]


class TestCLICommands(unittest.TestCase):
    """Test CLI commands."""

    def setUp(self):
        """Set up test environment."""
        self.test_dir = Path(tempfile.mkdtemp())
        self.runner = CliRunner()
        config = get_default_config()
        config["max_outer_iters"] = 15
        self.run_config = self.test_dir / "run.json"
        save_config(config, self.run_config)

    def tearDown(self):
        """Clean up test environment."""
        shutil.rmtree(self.test_dir)

    def invoke(self, *args):
        return self.runner.invoke(app, ["-q", *[str(a) for a in args]])

    def simulate(self, name="scene", config=None):
        out = self.test_dir / name
        args = ["simulate", "--out", out]
        if config is not None:
            path = self.test_dir / f"{name}.json"
            save_config(config, path)
            args += ["--config", path]
        result = self.invoke(*args)
        self.assertEqual(result.exit_code, 0, result.output)
        return out

    def test_simulate_writes_manifest_and_outputs(self):
        scene = self.simulate()
        manifest = json.loads((scene / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["command"], "simulate")
        self.assertEqual(len(manifest["outputs"]["images"]), 6)
        self.assertEqual(len(manifest["outputs"]["flows"]), 5)
        for paths in manifest["outputs"].values():
            for rel in paths:
                self.assertTrue((scene / rel).exists(), rel)

    def test_simulate_solve_eval(self):
        scene = self.simulate()
        run_dir = self.test_dir / "run"
        result = self.invoke("solve", scene, "--config", self.run_config, "--out", run_dir)
        self.assertEqual(result.exit_code, 0, result.output)
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["status"], "ok")
        self.assertLess(manifest["metrics"]["ate_rmse"], 1e-3)
        for name in ("trajectory.txt", "iterations.csv", "losses.csv", "graph.txt", "solver_log.jsonl"):
            self.assertTrue((run_dir / name).exists(), name)

        result = self.invoke("eval", run_dir / "trajectory.txt", scene / "groundtruth.txt")
        self.assertEqual(result.exit_code, 0, result.output)
        ate, ate_x, ate_y, ate_z = _csv_values(result.stdout)
        self.assertLess(ate, 1e-3)
        self.assertAlmostEqual(ate ** 2, ate_x ** 2 + ate_y ** 2 + ate_z ** 2, places=12)

    def test_solve_is_deterministic(self):
        scene = self.simulate()
        outputs = []
        for name in ("run_a", "run_b"):
            out = self.test_dir / name
            result = self.invoke("solve", scene, "--config", self.run_config, "--out", out, "--seed", 3)
            self.assertEqual(result.exit_code, 0, result.output)
            outputs.append(out)
        for name in ("trajectory.txt", "manifest.json", "iterations.csv", "losses.csv", "solver_log.jsonl"):
            self.assertEqual((outputs[0] / name).read_bytes(), (outputs[1] / name).read_bytes(), name)

    def test_single_flow_flag_recorded(self):
        scene = self.simulate()
        out = self.test_dir / "single"
        result = self.invoke("solve", scene, "--config", self.run_config, "--out", out, "--single-flow")
        self.assertEqual(result.exit_code, 0, result.output)
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        self.assertTrue(manifest["config"]["single_flow"])

    def test_missing_scene_directory_exits_1(self):
        result = self.invoke("solve", self.test_dir / "nowhere", "--out", self.test_dir / "run")
        self.assertEqual(result.exit_code, 1)

    def test_malformed_config_exits_2(self):
        scene = self.simulate()
        bad = self.test_dir / "bad.json"
        bad.write_text('{"mu": 0.5,,}', encoding="utf-8")
        result = self.invoke("solve", scene, "--config", bad, "--out", self.test_dir / "run")
        self.assertEqual(result.exit_code, 2)

    def test_eval_bad_trajectory_exits_2(self):
        est = self.test_dir / "est.txt"
        est.write_text("0.0 0 0 0 0 0 0 3\n", encoding="utf-8")
        result = self.invoke("eval", est, est)
        self.assertEqual(result.exit_code, 2)

    def test_decompose_recovers_mover_mask(self):
        scene = self.simulate("mover", config=mover_config(0))
        out = self.test_dir / "decomposed"
        result = self.invoke(
            "decompose",
            scene / "flows" / "flow_0000_0001.flo",
            scene / "groundtruth.txt",
            scene / "depths" / "inv_depth_0000.pfm",
            "--out", out,
            "--gt-mask", scene / "masks" / "mask_0000.pgm",
        )
        self.assertEqual(result.exit_code, 0, result.output)
        for name in ("static.flo", "dynamic.flo", "mask.pgm"):
            self.assertTrue((out / name).exists(), name)
        metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        self.assertGreaterEqual(metrics["iou"], 0.9)

    def _decompose_args(self, scene):
        return [
            "decompose",
            scene / "flows" / "flow_0000_0001.flo",
            scene / "groundtruth.txt",
            scene / "depths" / "inv_depth_0000.pfm",
            "--out", self.test_dir / "decomposed",
        ]

    def test_decompose_non_positive_mu_exits_2(self):
        scene = self.simulate()
        result = self.invoke(*self._decompose_args(scene), "--mu", 0)
        self.assertEqual(result.exit_code, 2)
        self.assertNotIsInstance(result.exception, ValueError)

    def test_decompose_bad_intrinsics_exits_2(self):
        scene = self.simulate()
        result = self.invoke(*self._decompose_args(scene), "--intrinsics", "0,0,31.5,23.5")
        self.assertEqual(result.exit_code, 2)

    def test_gradcheck_passes(self):
        result = self.invoke("gradcheck", "--instances", 2)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertNotIn("FAIL", result.stdout)

    def test_gradcheck_broken_jacobian_exits_3(self):
        result = self.invoke("gradcheck", "--instances", 1, "--break-jacobian")
        self.assertEqual(result.exit_code, 3)
        self.assertIn("camera_pose_jacobian", result.stdout)
        self.assertIn("FAIL", result.stdout)


if __name__ == "__main__":
    unittest.main()
