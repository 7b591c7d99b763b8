"""
dualflow-vo Evaluation

Trajectory I/O and absolute trajectory error.
"""

from .trajectory import Trajectory, AteReport, ate_report, ate_rmse, load_tum, save_tum, umeyama_align

__all__ = ["Trajectory", "AteReport", "ate_report", "ate_rmse", "load_tum", "save_tum", "umeyama_align"]
