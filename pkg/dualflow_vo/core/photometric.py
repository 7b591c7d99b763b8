"""
dualflow-vo Core: Photometric Losses

Self-supervised loss suite over the frame graph: SSIM + L1 geometry
photometric loss masked by Mask-Agg, L1 flow photometric loss, mask
cross-entropy against artificial (or ground-truth) labels, and the
iteration-weighted total. Analytic gradients are provided for the
continuous inputs of each loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ..config import LossConfig, RunConfig
from ..errors import EmptyInput, NoIncidentEdges, ShapeMismatch
from ..monitoring.logging import get_solver_logger
from .camera import Intrinsics, PixelGrid, reproject
from .dualflow import AggregatedMask, DynamicMask, FlowField, artificial_mask, mask_agg, warp_image
from .framegraph import FrameGraph
from .se3 import PoseSE3, relative


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CE_EPS = 1e-7


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def _window(x: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(x, size=size, mode="constant", cval=0.0)


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: int, c1: float, c2: float):
    mu_a = _window(a, window)
    mu_b = _window(b, window)
    mu_a_mu_b = mu_a * mu_b
    mu_a_sq = mu_a * mu_a
    mu_b_sq = mu_b * mu_b
    sigma_a = _window(a * a, window) - mu_a_sq
    sigma_b = _window(b * b, window) - mu_b_sq
    sigma_ab = _window(a * b, window) - mu_a_mu_b
    A1 = 2 * mu_a_mu_b + c1
    B1 = 2 * sigma_ab + c2
    A2 = mu_a_sq + mu_b_sq + c1
    B2 = sigma_a + sigma_b + c2
    return mu_a, mu_b, A1, B1, A2, B2


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """
    Windowed SSIM map with a uniform window, zero padded at the border.

    Raises:
        ShapeMismatch: if the images differ in shape
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    _, _, A1, B1, A2, B2 = _ssim_terms(a, b, window, c1, c2)
    return (A1 * B1) / (A2 * B2)


def ssim_grad(
    a: np.ndarray,
    b: np.ndarray,
    upstream: Optional[np.ndarray] = None,
    window: int = 7,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
) -> np.ndarray:
    """
    Gradient of sum(upstream * ssim(a, b)) with respect to a.

    The zero-padded uniform filter is self-adjoint, so the chain rule runs
    back through the same filter.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    u = np.ones_like(a) if upstream is None else np.asarray(upstream, dtype=np.float64)
    mu_a, mu_b, A1, B1, A2, B2 = _ssim_terms(a, b, window, c1, c2)
    D = A2 * B2
    S = (A1 * B1) / D
    # partials w.r.t. the windowed statistics mu_a, E[ab], E[a^2]
    d_mu_a = (2 * mu_b * B1 - 2 * mu_b * A1) / D - S * (2 * mu_a * B2 - 2 * mu_a * A2) / D
    d_m_ab = 2 * A1 / D
    d_m_aa = -S * A2 / D
    return (
        _window(u * d_mu_a, window)
        + b * _window(u * d_m_ab, window)
        + 2 * a * _window(u * d_m_aa, window)
    )


def pe_geo(a: np.ndarray, b: np.ndarray, alpha: float = 0.85, window: int = 7) -> np.ndarray:
    """pe = alpha/2 * (1 - SSIM) + (1 - alpha) * |a - b|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return alpha / 2 * (1 - ssim(a, b, window)) + (1 - alpha) * np.abs(a - b)


def _static_warp(graph: FrameGraph, intr: Intrinsics, i: int, j: int) -> Tuple[np.ndarray, np.ndarray]:
    fi, fj = graph.frames[i], graph.frames[j]
    grid = PixelGrid.for_shape(*fi.inv_depth.shape)
    corr = reproject(intr, relative(fi.pose, fj.pose), fi.inv_depth, grid)
    return warp_image(fj.image, corr)


def aggregated_masks(graph: FrameGraph) -> Dict[int, AggregatedMask]:
    """Mask-Agg for every frame with at least one masked outgoing edge."""
    out = {}
    for fid in graph.frame_ids():
        try:
            out[fid] = mask_agg(graph, fid)
        except NoIncidentEdges:
            continue
    return out


def geo_photo_loss(
    graph: FrameGraph,
    intr: Intrinsics,
    masks: Optional[Dict[int, AggregatedMask]] = None,
    alpha: float = 0.85,
    window: int = 7,
) -> Tuple[float, int]:
    """
    Geometry photometric loss: sum of pe(I_i, I_j->i) over static pixels
    divided by the total count N' of such pixels across all edges.

    `masks=None` scores every validly warped pixel. Frames missing from a
    given mask dict contribute nothing.

    Returns:
        (loss, N'); N' = 0 yields loss 0 and an `empty_loss_mask` log event
    """
    total = 0.0
    count = 0
    for edge in graph.sorted_edges():
        fi = graph.frames[edge.i]
        if masks is None:
            agg = np.ones(fi.inv_depth.shape)
        elif edge.i in masks:
            agg = masks[edge.i].values
        else:
            continue
        warped, valid = _static_warp(graph, intr, edge.i, edge.j)
        pe = pe_geo(fi.image, warped, alpha, window)
        use = valid & (agg >= 0.5)
        total += float(np.sum(pe[use]))
        count += int(use.sum())
    if count == 0:
        get_solver_logger().log_event("empty_loss_mask", message="no static pixel left for the geometry loss")
        return 0.0, 0
    return total / count, count


def _flow_warp(graph: FrameGraph, i: int, j: int, flow: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    fi, fj = graph.frames[i], graph.frames[j]
    grid = PixelGrid.for_shape(*fi.image.shape[:2])
    warped, valid = warp_image(fj.image, flow.target_coords(grid))
    return warped, valid & flow.valid


def flow_photo_loss(graph: FrameGraph) -> float:
    """Mean |I_i - I_j<p + F_o>| over validly warped pixels of every edge with an optical flow."""
    total = 0.0
    count = 0
    for edge in graph.sorted_edges():
        if edge.optical_flow is None:
            continue
        warped, valid = _flow_warp(graph, edge.i, edge.j, edge.optical_flow)
        diff = np.abs(graph.frames[edge.i].image - warped)
        total += float(np.sum(diff[valid]))
        count += int(valid.sum())
    return total / count if count else 0.0


def _bilinear_gradient(img: np.ndarray, coords: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """d img<coords> / d coords for bilinear sampling, shape (H, W, 2)."""
    height, width = img.shape
    u = np.where(valid, coords[..., 0], 0.0)
    v = np.where(valid, coords[..., 1], 0.0)
    u0 = np.clip(np.floor(u).astype(int), 0, width - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, height - 2)
    fu = u - u0
    fv = v - v0
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    du = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    dv = (1 - fu) * (i10 - i00) + fu * (i11 - i01)
    return np.where(valid[..., None], np.stack([du, dv], axis=-1), 0.0)


def flow_photo_grad(img_i: np.ndarray, img_j: np.ndarray, flow: FlowField) -> np.ndarray:
    """
    Gradient of mean |I_i - I_j<p + F>| over valid pixels w.r.t. the flow (H, W, 2).
    """
    grid = PixelGrid.for_shape(*img_i.shape)
    corr = flow.target_coords(grid)
    warped, valid = warp_image(img_j, corr)
    valid = valid & flow.valid
    n = int(valid.sum())
    if n == 0:
        return np.zeros(img_i.shape + (2,))
    sign = np.sign(warped - img_i)
    grad = _bilinear_gradient(img_j, corr.coords, valid)
    return np.where(valid[..., None], sign[..., None] * grad / n, 0.0)


def mask_ce_loss(pred: DynamicMask, label: DynamicMask) -> float:
    """
    Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].

    Raises:
        ShapeMismatch: if the masks differ in shape
    """
    _check_same(pred.values, label.values)
    p = np.clip(pred.values, CE_EPS, 1 - CE_EPS)
    y = label.values
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def mask_ce_grad(pred: DynamicMask, label: DynamicMask) -> np.ndarray:
    """Gradient of mask_ce_loss w.r.t. the prediction; zero where clamped."""
    _check_same(pred.values, label.values)
    x = pred.values
    p = np.clip(x, CE_EPS, 1 - CE_EPS)
    y = label.values
    grad = -(y / p - (1 - y) / (1 - p)) / x.size
    inside = (x > CE_EPS) & (x < 1 - CE_EPS)
    return np.where(inside, grad, 0.0)


def artificial_mask_loss(
    pred: DynamicMask,
    intr: Intrinsics,
    g_ij: PoseSE3,
    d_i: np.ndarray,
    f_o: FlowField,
    mu: float = 0.5,
) -> float:
    """Cross-entropy of the predicted mask against the artificial label."""
    grid = PixelGrid.for_shape(*d_i.shape)
    return mask_ce_loss(pred, artificial_mask(intr, g_ij, d_i, f_o, grid, mu))


def gt_mask_loss(pred: DynamicMask, gt_mask: DynamicMask) -> float:
    """Supervised variant: cross-entropy against a ground-truth mask."""
    return mask_ce_loss(pred, gt_mask)


@dataclass
class IterationLosses:
    """Loss components of one outer iteration."""
    geo: float
    flow: float
    mask: float
    n_static: int = 0


def iteration_losses(
    graph: FrameGraph,
    intr: Intrinsics,
    config: RunConfig,
    gt_masks: Optional[Dict[Tuple[int, int], DynamicMask]] = None,
) -> IterationLosses:
    """
    Evaluate the three loss components on the current graph.

    The mask term averages over edges that carry a mask and an optical flow;
    with `mask_supervision="gt"` it uses the supplied ground-truth masks.
    """
    loss_cfg = config.loss
    frames_have_images = all(f.image is not None for f in graph.frames.values())
    geo, n_static = 0.0, 0
    flow = 0.0
    if frames_have_images:
        geo, n_static = geo_photo_loss(graph, intr, aggregated_masks(graph), loss_cfg.alpha, loss_cfg.ssim_window)
        flow = flow_photo_loss(graph)

    mask_terms = []
    for edge in graph.sorted_edges():
        if edge.mask is None or edge.optical_flow is None:
            continue
        if config.mask_supervision == "gt" and gt_masks is not None and edge.key in gt_masks:
            mask_terms.append(gt_mask_loss(edge.mask, gt_masks[edge.key]))
        else:
            fi, fj = graph.frames[edge.i], graph.frames[edge.j]
            mask_terms.append(artificial_mask_loss(
                edge.mask, intr, relative(fi.pose, fj.pose), fi.inv_depth, edge.optical_flow, config.mu,
            ))
    mask = float(np.mean(mask_terms)) if mask_terms else 0.0
    return IterationLosses(geo=geo, flow=flow, mask=mask, n_static=n_static)


def weighted_total(losses: IterationLosses, cfg: LossConfig) -> float:
    return cfg.lambda1 * losses.geo + cfg.lambda2 * losses.flow + cfg.lambda3 * losses.mask


def total_self_sup_loss(losses: Sequence[IterationLosses], cfg: Optional[LossConfig] = None) -> float:
    """
    sum_k gamma^(K-1-k) * (lambda1 geo + lambda2 flow + lambda3 mask); the
    last iteration has weight 1.

    Raises:
        EmptyInput: if no iteration is given
    """
    if not losses:
        raise EmptyInput("total loss needs at least one iteration")
    cfg = cfg or LossConfig()
    K = len(losses)
    return float(sum(cfg.gamma ** (K - 1 - k) * weighted_total(l, cfg) for k, l in enumerate(losses)))
