"""
dualflow-vo Core: Target Providers

Sources of measured optical-flow correspondences for the update loop. The
oracle provider reads simulator ground truth (optionally noised); the
correlation provider refines the current estimate against the frames'
correlation volume.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np

from ..errors import ConfigError, MissingGroundTruth
from ..monitoring.logging import get_solver_logger
from .camera import CorrespondenceField, Intrinsics, PixelGrid, in_bounds
from .correlation import DEFAULT_FEATURE_DIM, DEFAULT_RADIUS, build_volume, extract_features, refine_targets
from .framegraph import Edge, FrameGraph


class TargetProvider(ABC):
    """Abstract base class for measurement sources."""

    name: str = "provider"

    @abstractmethod
    def acquire(
        self,
        graph: FrameGraph,
        intr: Intrinsics,
        edge: Edge,
        static_corr: CorrespondenceField,
    ) -> Tuple[CorrespondenceField, np.ndarray]:
        """
        Measured optical-flow correspondence for an edge.

        Args:
            graph: Current frame graph
            intr: Camera intrinsics
            edge: Edge being updated
            static_corr: Current static correspondence of the edge

        Returns:
            (correspondence p_i + F_o, confidence logits)
        """


class OracleProvider(TargetProvider):
    """
    Ground-truth optical flow from a simulated scene plus Gaussian noise.

    Noise is drawn once per edge from (seed, i, j) and cached, so repeated
    acquisitions return the same measurement.
    """

    name = "oracle"

    def __init__(self, scene=None, noise_sigma: float = 0.0, seed: int = 0, logit: float = 0.0):
        self.scene = scene
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.logit = float(logit)
        self._cache: Dict[Tuple[int, int], Tuple[CorrespondenceField, np.ndarray]] = {}

    def acquire(self, graph, intr, edge, static_corr):
        if self.scene is None:
            raise MissingGroundTruth("oracle provider needs a simulated scene")
        key = (edge.i, edge.j)
        if key not in self._cache:
            self._cache[key] = self._measure(edge.i, edge.j)
        corr, logits = self._cache[key]
        return CorrespondenceField(coords=corr.coords.copy(), valid=corr.valid.copy()), logits.copy()

    def _measure(self, i: int, j: int) -> Tuple[CorrespondenceField, np.ndarray]:
        from ..sim.world import gt_flows

        flows = gt_flows(self.scene, i, j)
        grid = PixelGrid.for_shape(*flows.optical.shape)
        corr = flows.optical.target_coords(grid)
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, i, j])
            corr.coords = corr.coords + rng.normal(0.0, self.noise_sigma, size=corr.coords.shape)
        logits = np.full(flows.optical.shape, self.logit)
        get_solver_logger().log_event("provider_targets", provider=self.name, i=i, j=j, noise_sigma=self.noise_sigma)
        return corr, logits


class CorrelationProvider(TargetProvider):
    """
    Windowed correlation search around the previous optical-flow estimate.

    The search starts at the static correspondence plus the edge's stored
    dynamic flow and moves each pixel at most `radius` pixels.
    """

    name = "correlation"

    def __init__(self, radius: int = DEFAULT_RADIUS, feature_dim: int = DEFAULT_FEATURE_DIM):
        self.radius = int(radius)
        self.feature_dim = int(feature_dim)

    def _features(self, graph: FrameGraph, frame_id: int):
        frame = graph.frames[frame_id]
        if frame.features is None:
            if frame.image is None:
                raise MissingGroundTruth(f"frame {frame_id} has no image for feature extraction")
            frame.features = extract_features(frame.image, self.feature_dim)
        return frame.features

    def acquire(self, graph, intr, edge, static_corr):
        pyr = build_volume(self._features(graph, edge.i), self._features(graph, edge.j))
        coords = static_corr.coords
        if edge.dyn_flow is not None:
            coords = coords + edge.dyn_flow.as_array()
        # unreliable static projections start from zero flow
        grid = PixelGrid.for_shape(*static_corr.shape)
        coords = np.where(static_corr.valid[..., None], coords, grid.coords)
        init = CorrespondenceField(coords=coords, valid=np.ones(static_corr.shape, dtype=bool))
        refined, logits = refine_targets(pyr, init, self.radius)
        refined.valid = refined.valid & np.isfinite(refined.coords).all(axis=-1) & in_bounds(intr, refined.coords)
        get_solver_logger().log_event("provider_targets", provider=self.name, i=edge.i, j=edge.j, radius=self.radius)
        return refined, logits


def make_provider(name: str, scene=None, noise_sigma: float = 0.0, seed: int = 0,
                  logit: float = 0.0, radius: int = DEFAULT_RADIUS,
                  feature_dim: int = DEFAULT_FEATURE_DIM) -> TargetProvider:
    """Build a provider from its config name."""
    if name == "oracle":
        return OracleProvider(scene=scene, noise_sigma=noise_sigma, seed=seed, logit=logit)
    if name == "correlation":
        return CorrelationProvider(radius=radius, feature_dim=feature_dim)
    raise ConfigError(f"unknown provider {name!r}")
