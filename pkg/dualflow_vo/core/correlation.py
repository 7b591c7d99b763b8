"""
dualflow-vo Core: Correlation

All-pairs correlation volume over feature maps, a 4-level average-pooled
pyramid, radius-r bilinear lookup, and a classical correspondence refiner
(windowed argmax plus quadratic sub-pixel fit).

Features are zero-mean, unit-norm intensity patches. Level 0 of the volume
holds H*W*H*W values, so callers should keep resolution small (<= 64x96).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from ..errors import ConfigError, ShapeMismatch
from .camera import CorrespondenceField


PYRAMID_LEVELS = 4
DEFAULT_RADIUS = 3
DEFAULT_FEATURE_DIM = 25
FLAT_LOGIT = -20.0
FLAT_TOL = 1e-12
EXACT_MATCH_TOL = 1e-9


@dataclass
class FeatureMap:
    """Dense per-pixel feature vectors, shape (H, W, D)."""
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[:2]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class CorrelationPyramid:
    """levels[k] has shape (H, W, H / 2^k, W / 2^k)."""
    levels: List[np.ndarray]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.levels[0].shape[:2]


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def extract_features(img: np.ndarray, dim: int = DEFAULT_FEATURE_DIM) -> FeatureMap:
    """
    Per-pixel zero-mean, unit-norm intensity patches.

    The patch side is ceil(sqrt(dim)); the first `dim` patch values are kept.
    Flat patches map to the zero vector.
    """
    gray = _to_gray(img)
    side = int(math.ceil(math.sqrt(dim)))
    lo = side // 2
    hi = side - 1 - lo
    padded = np.pad(gray, ((lo, hi), (lo, hi)), mode="reflect")
    patches = sliding_window_view(padded, (side, side)).reshape(gray.shape + (side * side,))
    patches = patches[..., :dim].astype(np.float64)
    patches = patches - patches.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(patches, axis=-1, keepdims=True)
    flat = norms < FLAT_TOL
    values = np.where(flat, 0.0, patches / np.where(flat, 1.0, norms))
    return FeatureMap(values=values)


def _avg_pool_last2(vol: np.ndarray) -> np.ndarray:
    h, w = vol.shape[2] // 2, vol.shape[3] // 2
    trimmed = vol[:, :, : 2 * h, : 2 * w]
    return trimmed.reshape(vol.shape[0], vol.shape[1], h, 2, w, 2).mean(axis=(3, 5))


def build_volume(f_i: FeatureMap, f_j: FeatureMap) -> CorrelationPyramid:
    """
    Level-0 dot products of all feature pairs, pooled 2x2 three times.

    Raises:
        ShapeMismatch: if the feature maps differ in shape
    """
    if f_i.values.shape != f_j.values.shape:
        raise ShapeMismatch(f"feature shapes differ: {f_i.values.shape} vs {f_j.values.shape}")
    h, w, d = f_i.values.shape
    corr = f_i.values.reshape(h * w, d) @ f_j.values.reshape(h * w, d).T
    levels = [corr.reshape(h, w, h, w)]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(_avg_pool_last2(levels[-1]))
    return CorrelationPyramid(levels=levels)


def _window_offsets(r: int) -> Tuple[np.ndarray, np.ndarray]:
    d = np.arange(-r, r + 1, dtype=np.float64)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return dx.ravel(), dy.ravel()


def _sample_level(level: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Bilinear sample of level[ui, vi, y, x] per source pixel; taps outside read 0.

    x, y have shape (H, W, T) in the level's pixel units.
    """
    h, w = level.shape[:2]
    n_taps = x.shape[-1]
    vi, ui = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_v = np.broadcast_to(vi[..., None], x.shape).astype(np.float64)
    src_u = np.broadcast_to(ui[..., None], x.shape).astype(np.float64)
    coords = np.stack([src_v.ravel(), src_u.ravel(), y.ravel(), x.ravel()])
    out = ndimage.map_coordinates(level, coords, order=1, mode="grid-constant", cval=0.0)
    return out.reshape(h, w, n_taps)


def lookup(pyr: CorrelationPyramid, coords: CorrespondenceField, r: int = DEFAULT_RADIUS) -> np.ndarray:
    """
    Sample a (2r+1)^2 window around coords at every pyramid level.

    Returns:
        Array of shape (H, W, levels * (2r+1)^2); level-major, row-major window
    """
    if r < 1:
        raise ConfigError("radius must be >= 1")
    dx, dy = _window_offsets(r)
    features = []
    for k, level in enumerate(pyr.levels):
        scale = 2.0 ** k
        x = coords.coords[..., 0:1] / scale + dx
        y = coords.coords[..., 1:2] / scale + dy
        features.append(_sample_level(level, x, y))
    return np.concatenate(features, axis=-1)


def _quadratic_offset(minus: np.ndarray, center: np.ndarray, plus: np.ndarray) -> np.ndarray:
    """1D parabola vertex offset, zero where the curvature is not negative."""
    curv = minus - 2.0 * center + plus
    ok = curv < -FLAT_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(ok, 0.5 * (minus - plus) / np.where(ok, curv, 1.0), 0.0)
    return np.clip(offset, -0.5, 0.5)


def refine_targets(
    pyr: CorrelationPyramid,
    init: CorrespondenceField,
    r: int = DEFAULT_RADIUS,
) -> Tuple[CorrespondenceField, np.ndarray]:
    """
    Move each correspondence to the level-0 correlation peak in its window.

    The peak is refined to sub-pixel precision by a separable quadratic fit;
    the fit is dropped (integer argmax kept) when the local Hessian is not
    negative definite or the peak is an exact match of unit features.
    Flat windows keep the initial coordinates.

    Returns:
        (refined correspondence field, confidence logits = peak - window mean)
    """
    if r < 1:
        raise ConfigError("radius must be >= 1")
    side = 2 * r + 1
    dx, dy = _window_offsets(r)
    level0 = pyr.levels[0]
    x = init.coords[..., 0:1] + dx
    y = init.coords[..., 1:2] + dy
    window = _sample_level(level0, x, y)

    peak_idx = np.argmax(window, axis=-1)
    peak = np.take_along_axis(window, peak_idx[..., None], axis=-1)[..., 0]
    mean = window.mean(axis=-1)
    flat = (peak - window.min(axis=-1)) < FLAT_TOL

    py, px = np.divmod(peak_idx, side)

    def _at(iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
        iy = np.clip(iy, 0, side - 1)
        ix = np.clip(ix, 0, side - 1)
        flat_idx = (iy * side + ix)[..., None]
        return np.take_along_axis(window, flat_idx, axis=-1)[..., 0]

    interior = (px > 0) & (px < side - 1) & (py > 0) & (py < side - 1)
    c = peak
    fxm, fxp = _at(py, px - 1), _at(py, px + 1)
    fym, fyp = _at(py - 1, px), _at(py + 1, px)
    fxx = fxm - 2.0 * c + fxp
    fyy = fym - 2.0 * c + fyp
    fxy = 0.25 * (_at(py + 1, px + 1) - _at(py + 1, px - 1) - _at(py - 1, px + 1) + _at(py - 1, px - 1))
    neg_def = (fxx < -FLAT_TOL) & (fxx * fyy - fxy * fxy > FLAT_TOL)
    sub_x = _quadratic_offset(fxm, c, fxp)
    sub_y = _quadratic_offset(fym, c, fyp)
    # an exact feature match stays on the integer peak
    exact = peak >= 1.0 - EXACT_MATCH_TOL
    use_fit = interior & neg_def & ~exact
    sub_x = np.where(use_fit, sub_x, 0.0)
    sub_y = np.where(use_fit, sub_y, 0.0)

    shift_x = np.where(flat, 0.0, (px - r) + sub_x)
    shift_y = np.where(flat, 0.0, (py - r) + sub_y)
    refined = init.coords + np.stack([shift_x, shift_y], axis=-1)
    logits = np.where(flat, FLAT_LOGIT, np.maximum(peak - mean, FLAT_LOGIT))
    return CorrespondenceField(coords=refined, valid=init.valid.copy()), logits
