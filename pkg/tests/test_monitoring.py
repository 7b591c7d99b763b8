"""Tests for solver logging and segmentation metrics."""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from dualflow_vo.monitoring import MetricsCollector, SolverLogger, get_solver_logger, segmentation_metrics


def test_log_event_converts_numpy_scalars():
    logger = SolverLogger()
    entry = logger.log_event("dba_step", 2, cost=np.float64(0.25), accepted=np.bool_(True))
    assert entry.values == {"cost": 0.25, "accepted": True}
    assert type(entry.values["cost"]) is float
    assert logger.get_logs_by_event("dba_step") == [entry]


def test_logger_keeps_most_recent():
    logger = SolverLogger(max_logs=3)
    for k in range(5):
        logger.log_event("outer_iteration", k)
    assert [e.iteration for e in logger.logs] == [2, 3, 4]
    assert [e.iteration for e in logger.get_recent_logs(2)] == [3, 4]
    logger.clear()
    assert logger.logs == []


def test_log_file_and_export_are_json_lines():
    with tempfile.TemporaryDirectory() as tmpdir:
        log_file = Path(tmpdir) / "logs" / "solver.jsonl"
        logger = SolverLogger(log_file=log_file)
        logger.log_event("step_rejected", 1, message="cost went up", cost=2.0)
        logger.log_event("outer_iteration", 1, cost=1.5)
        lines = log_file.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0]) == {
            "event": "step_rejected",
            "iteration": 1,
            "message": "cost went up",
            "values": {"cost": 2.0},
        }

        exported = Path(tmpdir) / "export.jsonl"
        logger.export(exported)
        assert exported.read_text(encoding="utf-8") == log_file.read_text(encoding="utf-8")


def test_global_logger_is_shared():
    assert get_solver_logger() is get_solver_logger()


def test_perfect_prediction():
    true = np.zeros((4, 4), dtype=bool)
    true[1:3, 1:3] = True
    m = segmentation_metrics(true, true)
    assert (m.precision, m.recall, m.iou) == (1.0, 1.0, 1.0)
    assert m.n_dynamic_true == 4 and m.n_pixels == 16


def test_half_overlap():
    true = np.zeros((2, 4), dtype=bool)
    true[:, :2] = True
    pred = np.zeros((2, 4), dtype=bool)
    pred[:, 1:3] = True
    m = segmentation_metrics(pred, true)
    assert m.precision == pytest.approx(0.5)
    assert m.recall == pytest.approx(0.5)
    assert m.iou == pytest.approx(1.0 / 3.0)


def test_valid_subset_and_empty_classes():
    true = np.array([[True, False], [False, False]])
    pred = np.array([[False, True], [False, False]])
    valid = np.array([[False, False], [True, True]])
    m = segmentation_metrics(pred, true, valid=valid)
    assert (m.precision, m.recall, m.iou) == (1.0, 1.0, 1.0)
    assert m.n_pixels == 2


def test_missed_object_scores_zero():
    true = np.ones((3, 3), dtype=bool)
    m = segmentation_metrics(np.zeros((3, 3), dtype=bool), true)
    assert (m.precision, m.recall, m.iou) == (0.0, 0.0, 0.0)


def test_collector_summary():
    collector = MetricsCollector()
    assert collector.get_summary()["count"] == 0
    true = np.eye(3, dtype=bool)
    collector.record("0-1", true, true)
    collector.record("1-0", np.zeros((3, 3), dtype=bool), true)
    summary = collector.get_summary()
    assert summary["count"] == 2
    assert summary["iou"] == pytest.approx(0.5)
    assert collector.get_metrics("0-1").to_dict()["recall"] == 1.0
    assert collector.get_metrics("2-3") is None
