"""
Transforms
==========

Rigid (rotation + translation about a pivot) and affine 2-D transforms, their
closed-form weighted least-squares fits from a flow field, and numpy image
warps.

Convention: a transform T maps a point p of frame a to T(p) in frame b.
warp_array(a, T) produces b with b(T(p)) = a(p), i.e. content moves by T, so
the flow from a to warp_array(a, T) is T(p) - p.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from metastab.errors import AlignmentError


def image_center(height: int, width: int) -> Tuple[float, float]:
    """Pivot (cx, cy) in pixel coordinates"""
    return (width - 1) / 2.0, (height - 1) / 2.0


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


@dataclass(frozen=True)
class RigidTransform:
    """
    p' = R(theta)·(p − c) + c + (tx, ty)

    Linear part is an exact rotation; scale and shear are unrepresentable.
    """

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not abs(self.theta) < math.pi / 2:
            raise AlignmentError(f"RigidTransform: |theta| = {abs(self.theta):.4f} rad is not below pi/2")

    @classmethod
    def identity(cls, center: Tuple[float, float] = (0.0, 0.0)) -> 'RigidTransform':
        return cls(0.0, 0.0, 0.0, tuple(center))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def offset(self) -> np.ndarray:
        """Translation of the equivalent p' = R p + offset form"""
        center = np.asarray(self.center, dtype=np.float64)
        return center - self.rotation @ center + np.array([self.tx, self.ty])

    def matrix(self) -> np.ndarray:
        """3×3 homogeneous matrix"""
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = self.offset
        return m

    def apply(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xs - cx, ys - cy
        return c * dx - s * dy + cx + self.tx, s * dx + c * dy + cy + self.ty

    def flow(self, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
        """Displacement T(p) − p on a height×width grid"""
        xs, ys = pixel_grid(height, width)
        px, py = self.apply(xs, ys)
        return px - xs, py - ys

    def inverse(self) -> 'RigidTransform':
        c, s = math.cos(self.theta), math.sin(self.theta)
        # R^T applied to −t keeps the same pivot
        tx = -(c * self.tx + s * self.ty)
        ty = -(-s * self.tx + c * self.ty)
        return RigidTransform(-self.theta, tx, ty, self.center)

    def compose(self, other: 'RigidTransform') -> 'RigidTransform':
        """self ∘ other: apply other first, then self (pivot of self kept)"""
        if other.theta == 0.0 and other.tx == 0.0 and other.ty == 0.0 and other.center == self.center:
            return self
        if self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0 and other.center == self.center:
            return other
        return RigidTransform.from_matrix(self.matrix() @ other.matrix(), self.center)

    @classmethod
    def from_matrix(cls, m: np.ndarray, center: Tuple[float, float] = (0.0, 0.0)) -> 'RigidTransform':
        theta = math.atan2(m[1, 0], m[0, 0])
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        c = np.asarray(center, dtype=np.float64)
        t = m[:2, 2] - c + rot @ c
        return cls(theta, float(t[0]), float(t[1]), tuple(center))

    def as_dict(self) -> Dict[str, float]:
        return {'theta': self.theta, 'tx': self.tx, 'ty': self.ty, 'cx': self.center[0], 'cy': self.center[1]}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'RigidTransform':
        return cls(float(data['theta']), float(data['tx']), float(data['ty']),
                   (float(data.get('cx', 0.0)), float(data.get('cy', 0.0))))


@dataclass(frozen=True)
class AffineTransform:
    """p' = A·(p − c) + c + b with an unconstrained 2×2 linear part A"""

    linear: np.ndarray
    translation: np.ndarray
    center: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls, center: Tuple[float, float] = (0.0, 0.0)) -> 'AffineTransform':
        return cls(np.eye(2), np.zeros(2), tuple(center))

    def apply(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        dx, dy = xs - cx, ys - cy
        a = self.linear
        return (a[0, 0] * dx + a[0, 1] * dy + cx + self.translation[0],
                a[1, 0] * dx + a[1, 1] * dy + cy + self.translation[1])

    def inverse(self) -> 'AffineTransform':
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation, self.center)

    @property
    def scale(self) -> float:
        return math.sqrt(abs(float(np.linalg.det(self.linear))))

    @property
    def anisotropy(self) -> float:
        """smaller / larger singular value of the linear part"""
        sv = np.linalg.svd(self.linear, compute_uv=False)
        return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0


# ============================================================================
# FITTING
# ============================================================================

def _weighted_points(u: np.ndarray, v: np.ndarray, weights: Optional[np.ndarray]):
    h, w = u.shape
    xs, ys = pixel_grid(h, w)
    wts = np.ones((h, w)) if weights is None else np.asarray(weights, dtype=np.float64)
    if wts.shape != (h, w):
        raise AlignmentError(f"weights shape {wts.shape} does not match flow {(h, w)}")
    mask = wts > 0
    return xs[mask], ys[mask], u[mask].astype(np.float64), v[mask].astype(np.float64), wts[mask], (h, w)


def _check_spread(px: np.ndarray, py: np.ndarray, w: np.ndarray, op: str):
    if px.size < 3:
        raise AlignmentError(f"{op}: need at least 3 weighted pixels, got {px.size}")
    total = w.sum()
    mx, my = (w * px).sum() / total, (w * py).sum() / total
    dx, dy = px - mx, py - my
    cov = np.array([[(w * dx * dx).sum(), (w * dx * dy).sum()],
                    [(w * dx * dy).sum(), (w * dy * dy).sum()]]) / total
    if np.linalg.eigvalsh(cov)[0] < 1e-9:
        raise AlignmentError(f"{op}: weighted pixels are collinear")


def fit_rigid_procrustes(
    u: np.ndarray,
    v: np.ndarray,
    weights: Optional[np.ndarray] = None,
    center: Optional[Tuple[float, float]] = None,
) -> RigidTransform:
    """
    Weighted least-squares rigid transform explaining a flow field

    Minimizes Σ w·‖R(p−c) + c + t − (p + F(p))‖² in closed form.

    Args:
        u, v: Flow components (H×W)
        weights: Non-negative per-pixel weights (uniform if None)
        center: Rotation pivot, image center by default

    Returns:
        RigidTransform about the pivot
    """
    px, py, fu, fv, w, (h, wd) = _weighted_points(u, v, weights)
    _check_spread(px, py, w, 'fit_rigid_procrustes')
    cx, cy = image_center(h, wd) if center is None else center
    qx, qy = px + fu - cx, py + fv - cy
    px, py = px - cx, py - cy

    total = w.sum()
    pmx, pmy = (w * px).sum() / total, (w * py).sum() / total
    qmx, qmy = (w * qx).sum() / total, (w * qy).sum() / total
    ax, ay = px - pmx, py - pmy
    bx, by = qx - qmx, qy - qmy

    theta = math.atan2((w * (ax * by - ay * bx)).sum(), (w * (ax * bx + ay * by)).sum())
    c, s = math.cos(theta), math.sin(theta)
    tx = qmx - (c * pmx - s * pmy)
    ty = qmy - (s * pmx + c * pmy)
    return RigidTransform(theta, float(tx), float(ty), (cx, cy))


def fit_affine(
    u: np.ndarray,
    v: np.ndarray,
    weights: Optional[np.ndarray] = None,
    center: Optional[Tuple[float, float]] = None,
) -> AffineTransform:
    """
    Weighted least-squares 6-DoF affine fit of a flow field

    Solved for the displacement F(p) ≈ D·(p − c) + b so a zero flow gives
    A = I + D = I exactly.
    """
    px, py, fu, fv, w, (h, wd) = _weighted_points(u, v, weights)
    _check_spread(px, py, w, 'fit_affine')
    cx, cy = image_center(h, wd) if center is None else center
    design = np.stack([px - cx, py - cy, np.ones_like(px)], axis=1)
    sw = np.sqrt(w)[:, None]
    normal = (design * sw).T @ (design * sw)
    try:
        coef_u = np.linalg.solve(normal, (design * sw).T @ (fu * sw[:, 0]))
        coef_v = np.linalg.solve(normal, (design * sw).T @ (fv * sw[:, 0]))
    except np.linalg.LinAlgError as e:
        raise AlignmentError(f"fit_affine: singular normal equations ({e})") from e
    linear = np.eye(2) + np.array([[coef_u[0], coef_u[1]], [coef_v[0], coef_v[1]]])
    return AffineTransform(linear, np.array([coef_u[2], coef_v[2]]), (cx, cy))


# ============================================================================
# NUMPY WARPS
# ============================================================================

def _resample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    channels = [image] if image.ndim == 2 else [image[..., c] for c in range(image.shape[2])]
    out = [ndimage.map_coordinates(ch, [sy, sx], order=1, mode='nearest') for ch in channels]
    return out[0] if image.ndim == 2 else np.stack(out, axis=-1)


def warp_array(image: np.ndarray, transform: RigidTransform) -> np.ndarray:
    """
    Inverse-mapped bilinear warp; out-of-frame samples replicate the edge

    Args:
        image: H×W or H×W×C array
        transform: Rigid transform moving content from p to T(p)
    """
    h, w = image.shape[:2]
    xs, ys = pixel_grid(h, w)
    sx, sy = transform.inverse().apply(xs, ys)
    return _resample(image, sx, sy).astype(image.dtype, copy=False)


def warp_affine_array(image: np.ndarray, transform: AffineTransform) -> np.ndarray:
    h, w = image.shape[:2]
    xs, ys = pixel_grid(h, w)
    sx, sy = transform.inverse().apply(xs, ys)
    return _resample(image, sx, sy).astype(image.dtype, copy=False)


def sample_flow(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """image(p + F(p)) with edge replication"""
    h, w = image.shape[:2]
    xs, ys = pixel_grid(h, w)
    return _resample(image, xs + u, ys + v).astype(image.dtype, copy=False)
