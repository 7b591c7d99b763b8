"""
dualflow-vo Simulator

Deterministic rigid-motion scenes with ground-truth poses, depths, masks and flows.
"""

from .world import Scene, GTFlows, generate, gt_flows, mover_config, perturb, scene_graph

__all__ = ["Scene", "GTFlows", "generate", "gt_flows", "mover_config", "perturb", "scene_graph"]
