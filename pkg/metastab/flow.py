"""
Optical Flow
============

Dense flow by coarse-to-fine Lucas-Kanade with iterative warping, and a
"global" flow that keeps only the dominant camera motion.

global_flow fits a rigid transform to the dense flow by iteratively
reweighted least squares (Huber weights, confidence weighted) and replaces
outliers and low-confidence pixels by the rigid prediction. Independently
moving objects and cropped borders are therefore filled with camera motion.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from metastab.errors import AlignmentError, FlowEstimationError, ShapeError
from metastab.frames import Frame, as_array
from metastab.settings_manager import flow_params
from metastab.transforms import RigidTransform, fit_rigid_procrustes, sample_flow

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
MIN_LEVEL_SIZE = 32


@dataclass
class FlowField:
    """
    Per-pixel displacement (u, v) with a confidence map in [0, 1]

    a(p) ≈ b(p + F(p)). Flows returned by global_flow also carry the fitted
    rigid transform and the inlier mask.
    """

    u: np.ndarray
    v: np.ndarray
    confidence: np.ndarray
    rigid: Optional[RigidTransform] = None
    inliers: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def luma(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame.astype(np.float64)
    return frame.astype(np.float64) @ LUMA


def pyramid_levels(height: int, width: int) -> int:
    """floor(log2(min_dim / 32)) + 1, at least one level"""
    smallest = min(height, width)
    if smallest < MIN_LEVEL_SIZE:
        return 1
    return int(math.floor(math.log2(smallest / MIN_LEVEL_SIZE))) + 1


def _normalize_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Joint mean/std photometric normalization"""
    joint = np.concatenate([a.ravel(), b.ravel()])
    mean, std = joint.mean(), joint.std()
    scale = 1.0 / std if std > 1e-12 else 1.0
    return (a - mean) * scale, (b - mean) * scale


def _build_pyramid(image: np.ndarray, levels: int) -> list:
    pyramid = [image]
    for _ in range(levels - 1):
        smoothed = ndimage.gaussian_filter(pyramid[-1], 1.0, mode='nearest')
        pyramid.append(smoothed[::2, ::2])
    return pyramid


def _upsample_flow(u: np.ndarray, v: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    factors = (shape[0] / u.shape[0], shape[1] / u.shape[1])
    up_u = ndimage.zoom(u, factors, order=1, mode='nearest', grid_mode=True)[:shape[0], :shape[1]]
    up_v = ndimage.zoom(v, factors, order=1, mode='nearest', grid_mode=True)[:shape[0], :shape[1]]
    return up_u * factors[1], up_v * factors[0]


def _lk_level(a, b, u, v, iterations, window_sigma, regularization=1e-6, step_limit=2.0):
    """Refine (u, v) on one pyramid level; returns flow, structure-tensor λmin and residual"""
    for _ in range(iterations):
        warped = sample_flow(b, u, v)
        gy_a, gx_a = np.gradient(a)
        gy_w, gx_w = np.gradient(warped)
        ix, iy = 0.5 * (gx_a + gx_w), 0.5 * (gy_a + gy_w)
        it = warped - a
        sxx = ndimage.gaussian_filter(ix * ix, window_sigma, mode='nearest') + regularization
        syy = ndimage.gaussian_filter(iy * iy, window_sigma, mode='nearest') + regularization
        sxy = ndimage.gaussian_filter(ix * iy, window_sigma, mode='nearest')
        sxt = ndimage.gaussian_filter(ix * it, window_sigma, mode='nearest')
        syt = ndimage.gaussian_filter(iy * it, window_sigma, mode='nearest')
        det = sxx * syy - sxy * sxy
        du = (sxy * syt - syy * sxt) / det
        dv = (sxy * sxt - sxx * syt) / det
        u = u + np.clip(du, -step_limit, step_limit)
        v = v + np.clip(dv, -step_limit, step_limit)

    warped = sample_flow(b, u, v)
    gy, gx = np.gradient(a)
    sxx = ndimage.gaussian_filter(gx * gx, window_sigma, mode='nearest')
    syy = ndimage.gaussian_filter(gy * gy, window_sigma, mode='nearest')
    sxy = ndimage.gaussian_filter(gx * gy, window_sigma, mode='nearest')
    half_trace = 0.5 * (sxx + syy)
    lam_min = half_trace - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    residual = ndimage.gaussian_filter(np.abs(warped - a), window_sigma, mode='nearest')
    return u, v, np.maximum(lam_min, 0.0), residual


def dense_flow(
    a: Union[Frame, np.ndarray],
    b: Union[Frame, np.ndarray],
    iterations: Optional[int] = None,
    window_sigma: Optional[float] = None,
    presmooth_sigma: Optional[float] = None,
    confidence_kappa: Optional[float] = None,
    residual_sigma: Optional[float] = None,
) -> FlowField:
    """
    Pyramidal Lucas-Kanade flow from a to b

    Args:
        a, b: Frames of equal resolution (RGB or grayscale)
        iterations: Warped LK updates per pyramid level
        window_sigma: Gaussian integration window
        presmooth_sigma: Smoothing applied to luma before the pyramid
        confidence_kappa: λmin squashing constant
        residual_sigma: Photometric residual attenuation

    Returns:
        FlowField with a(p) ≈ b(p + F(p)) and a confidence map
    """
    params = flow_params()
    iterations = params['iterations'] if iterations is None else iterations
    window_sigma = params['window_sigma'] if window_sigma is None else window_sigma
    presmooth_sigma = params['presmooth_sigma'] if presmooth_sigma is None else presmooth_sigma
    kappa = params['confidence_kappa'] if confidence_kappa is None else confidence_kappa
    residual_sigma = params['residual_sigma'] if residual_sigma is None else residual_sigma

    fa, fb = as_array(a), as_array(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"dense_flow: frame shapes {fa.shape} and {fb.shape} differ")

    la, lb = _normalize_pair(luma(fa), luma(fb))
    if presmooth_sigma > 0:
        la = ndimage.gaussian_filter(la, presmooth_sigma, mode='nearest')
        lb = ndimage.gaussian_filter(lb, presmooth_sigma, mode='nearest')

    levels = pyramid_levels(*la.shape)
    pyr_a, pyr_b = _build_pyramid(la, levels), _build_pyramid(lb, levels)

    u = np.zeros(pyr_a[-1].shape)
    v = np.zeros(pyr_a[-1].shape)
    for level in range(levels - 1, -1, -1):
        if u.shape != pyr_a[level].shape:
            u, v = _upsample_flow(u, v, pyr_a[level].shape)
        u, v, lam_min, residual = _lk_level(pyr_a[level], pyr_b[level], u, v, iterations, window_sigma)

    confidence = lam_min / (lam_min + kappa) * np.exp(-residual ** 2 / (2 * residual_sigma ** 2))
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise FlowEstimationError("dense_flow produced non-finite displacements")
    return FlowField(u.astype(np.float32), v.astype(np.float32), confidence.astype(np.float32))


def global_flow(
    a: Union[Frame, np.ndarray],
    b: Union[Frame, np.ndarray],
    tau_out: Optional[float] = None,
    c_min: Optional[float] = None,
    huber_delta: Optional[float] = None,
    irls_iterations: Optional[int] = None,
    min_inlier_fraction: Optional[float] = None,
    **dense_kwargs,
) -> FlowField:
    """
    Camera-motion flow: dense flow with dynamic objects and holes replaced by
    the robustly fitted rigid motion

    Raises:
        FlowEstimationError: fewer than min_inlier_fraction pixels agree with the fit
    """
    params = flow_params()
    tau_out = params['tau_out'] if tau_out is None else tau_out
    c_min = params['c_min'] if c_min is None else c_min
    delta = params['huber_delta'] if huber_delta is None else huber_delta
    irls_iterations = params['irls_iterations'] if irls_iterations is None else irls_iterations
    min_inliers = params['min_inlier_fraction'] if min_inlier_fraction is None else min_inlier_fraction

    dense = dense_flow(a, b, **dense_kwargs)
    h, w = dense.u.shape
    u, v = dense.u.astype(np.float64), dense.v.astype(np.float64)
    base_weights = dense.confidence.astype(np.float64)
    if base_weights.sum() <= 0:
        raise FlowEstimationError("no dominant rigid motion (zero confidence everywhere)")

    weights = base_weights
    transform = None
    try:
        for _ in range(irls_iterations):
            transform = fit_rigid_procrustes(u, v, weights)
            ru, rv = transform.flow(h, w)
            deviation = np.hypot(u - ru, v - rv)
            huber = np.where(deviation <= delta, 1.0, delta / np.maximum(deviation, 1e-12))
            weights = base_weights * huber
    except AlignmentError as e:
        raise FlowEstimationError(f"no dominant rigid motion ({e})") from e

    ru, rv = transform.flow(h, w)
    deviation = np.hypot(u - ru, v - rv)
    inliers = (deviation <= tau_out) & (dense.confidence >= c_min)
    fraction = float(inliers.mean())
    if fraction < min_inliers:
        raise FlowEstimationError(f"no dominant rigid motion ({fraction:.1%} inliers)")

    logger.debug("global_flow: theta=%.5f t=(%.3f, %.3f) inliers=%.1f%%",
                 transform.theta, transform.tx, transform.ty, 100 * fraction)
    return FlowField(
        np.where(inliers, u, ru).astype(np.float32),
        np.where(inliers, v, rv).astype(np.float32),
        dense.confidence,
        rigid=transform,
        inliers=inliers,
    )
