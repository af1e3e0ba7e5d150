"""
Losses
======

Inner (test-time) and outer (meta-update) objectives.

inner_loss  = λ_s · inner_stability + λ_p · inner_quality
outer_loss  = outer_stability + Σ_t −log CX(final features)

Stability terms measure flow between synthesized and reference frames with
surrogate_flow, a coarse-to-fine Gauss-Newton brightness-constancy flow built
from tensor primitives so gradients reach the synthesized pixels. Quality
terms compare features of a frozen, seeded convolutional pyramid.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from metastab import autodiff as ad
from metastab.autodiff import ParamVector, Tensor
from metastab.errors import ConfigError, ShapeError
from metastab.settings_manager import get_setting

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 10.0
    lambda_p: float = 1.0

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_p < 0:
            raise ConfigError(f"loss weights must be non-negative, got λ_s={self.lambda_s}, λ_p={self.lambda_p}")
        if self.lambda_s == 0 and self.lambda_p == 0:
            raise ConfigError("loss weights λ_s and λ_p cannot both be zero")


@dataclass
class LossBreakdown:
    """Total loss tensor plus float terms for logging"""

    total: Tensor
    stability: float = 0.0
    quality: float = 0.0
    perceptual: float = 0.0
    gram: float = 0.0
    contextual: float = 0.0
    lambda_s: Optional[float] = None
    lambda_p: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total.data).all())

    def as_record(self) -> Dict[str, float]:
        record = {
            'total': self.value,
            'stability': self.stability,
            'quality': self.quality,
            'perceptual': self.perceptual,
            'gram': self.gram,
            'contextual': self.contextual,
        }
        if self.lambda_s is not None:
            record['lambda_s'] = self.lambda_s
            record['lambda_p'] = self.lambda_p
        record.update(self.extra)
        return record


def frames_to_tensor(frames: Union[np.ndarray, Tensor]) -> Tensor:
    """N×H×W×3 array → N×3×H×W constant tensor"""
    if isinstance(frames, Tensor):
        return frames
    arr = np.asarray(frames)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected N×H×W×3 frames, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


# ============================================================================
# TENSOR IMAGE HELPERS
# ============================================================================

def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-xs ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian on N×H×W with edge replication"""
    n, h, w = x.shape
    kernel = _gaussian_kernel(sigma)
    r = kernel.size // 2
    img = ad.reshape(x, (n, 1, h, w))
    img = ad.edge_pad(img, (r, r, r, r))
    img = ad.conv2d(img, Tensor(kernel.reshape(1, 1, 1, -1)))
    img = ad.conv2d(img, Tensor(kernel.reshape(1, 1, -1, 1)))
    return ad.reshape(img, (n, h, w))


def image_gradients(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Central differences (∂x, ∂y) of N×H×W with edge replication"""
    n, h, w = x.shape
    img = ad.edge_pad(ad.reshape(x, (n, 1, h, w)), (1, 1, 1, 1))
    kx = Tensor(np.array([[[[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]]]]))
    ky = Tensor(np.array([[[[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]]]]))
    return ad.reshape(ad.conv2d(img, kx), (n, h, w)), ad.reshape(ad.conv2d(img, ky), (n, h, w))


def avg_pool2(x: Tensor) -> Tensor:
    n, h, w = x.shape
    pooled = ad.conv2d(ad.reshape(x, (n, 1, h, w)), Tensor(np.full((1, 1, 2, 2), 0.25)), stride=2)
    return ad.reshape(pooled, (n, h // 2, w // 2))


def to_luma(frames: Tensor) -> Tensor:
    """N×3×H×W → N×H×W"""
    n, _, h, w = frames.shape
    gray = ad.conv2d(frames, Tensor(np.array(LUMA_WEIGHTS).reshape(1, 3, 1, 1)))
    return ad.reshape(gray, (n, h, w))


def surrogate_levels(height: int, width: int, max_levels: int = 3, min_size: int = 16) -> int:
    levels = 1
    while levels < max_levels:
        scale = 2 ** levels
        if height % scale or width % scale or min(height, width) // scale < min_size:
            break
        levels += 1
    return levels


def _upsample_flow(f: Tensor) -> Tensor:
    n, h, w = f.shape
    up = ad.upsample2x(ad.reshape(f, (n, 1, h, w)))
    return ad.mul_scalar(ad.reshape(up, (n, 2 * h, 2 * w)), 2.0)


def surrogate_flow(
    a: Tensor,
    b: Tensor,
    steps: Optional[int] = None,
    regularization: Optional[float] = None,
    window_sigma: Optional[float] = None,
    presmooth_sigma: float = 1.0,
    step_limit: float = 2.0,
) -> Tuple[Tensor, Tensor]:
    """
    Differentiable flow from a to b (a(p) ≈ b(p + F(p))) for N×3×H×W batches

    Returns:
        (u, v) tensors of shape N×H×W
    """
    steps = int(get_setting('losses', 'surrogate_steps')) if steps is None else steps
    reg = float(get_setting('losses', 'surrogate_regularization')) if regularization is None else regularization
    sigma = float(get_setting('losses', 'surrogate_window_sigma')) if window_sigma is None else window_sigma
    if a.shape != b.shape:
        raise ShapeError(f"surrogate_flow: shapes {a.shape} and {b.shape} differ")

    ga, gb = to_luma(a), to_luma(b)
    if presmooth_sigma > 0:
        ga, gb = gaussian_blur(ga, presmooth_sigma), gaussian_blur(gb, presmooth_sigma)

    levels = surrogate_levels(*ga.shape[1:])
    pyr_a, pyr_b = [ga], [gb]
    for _ in range(levels - 1):
        pyr_a.append(avg_pool2(pyr_a[-1]))
        pyr_b.append(avg_pool2(pyr_b[-1]))

    n = ga.shape[0]
    u = v = None
    for level in range(levels - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        h, w = la.shape[1:]
        if u is None:
            u, v = ad.zeros((n, h, w)), ad.zeros((n, h, w))
        else:
            u, v = _upsample_flow(u), _upsample_flow(v)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        grid_x = Tensor(np.broadcast_to(xs, (n, h, w)).copy())
        grid_y = Tensor(np.broadcast_to(ys, (n, h, w)).copy())
        ix, iy = image_gradients(la)
        sxx = ad.add_scalar(gaussian_blur(ix * ix, sigma), reg)
        syy = ad.add_scalar(gaussian_blur(iy * iy, sigma), reg)
        sxy = gaussian_blur(ix * iy, sigma)
        det = sxx * syy - sxy * sxy
        for _ in range(steps):
            warped = ad.bilinear_sample(ad.reshape(lb, (n, 1, h, w)), grid_x + u, grid_y + v)
            it = ad.reshape(warped, (n, h, w)) - la
            sxt = gaussian_blur(ix * it, sigma)
            syt = gaussian_blur(iy * it, sigma)
            du = (sxy * syt - syy * sxt) / det
            dv = (sxy * sxt - sxx * syt) / det
            u = u + ad.clamp(du, -step_limit, step_limit)
            v = v + ad.clamp(dv, -step_limit, step_limit)
    return u, v


# ============================================================================
# FEATURE EXTRACTOR
# ============================================================================

def orthogonal(shape: Tuple[int, ...], rng: np.random.Generator, gain: float = math.sqrt(2.0)) -> np.ndarray:
    rows, cols = shape[0], int(np.prod(shape[1:]))
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    q = q.T if rows < cols else q
    return gain * q[:rows, :cols].reshape(shape)


class FeatureExtractor:
    """
    Frozen pyramid of conv(3×3, stride 2) + ReLU stages

    Weights come from a seeded orthogonal initializer (or an MSTB file) and
    never require gradients.
    """

    def __init__(self, widths: Optional[Sequence[int]] = None, seed: Optional[int] = None,
                 weights: Optional[Dict[str, np.ndarray]] = None):
        widths = tuple(get_setting('losses', 'feature_widths')) if widths is None else tuple(widths)
        seed = int(get_setting('losses', 'feature_seed')) if seed is None else seed
        self.widths = widths
        self.seed = seed
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, in_ch = {}, 3
            for i, width in enumerate(widths, start=1):
                weights[f'stage{i}.w'] = orthogonal((width, in_ch, 3, 3), rng)
                weights[f'stage{i}.b'] = np.zeros(width)
                in_ch = width
        self.params = ParamVector.from_arrays(weights, requires_grad=False)

    @property
    def stages(self) -> int:
        return sum(1 for name in self.params if name.endswith('.w'))

    def __call__(self, frames: Tensor) -> List[Tensor]:
        """N×3×H×W in [0, 1] → per-stage feature maps"""
        x = ad.add_scalar(frames, -0.5)
        features = []
        for i in range(1, self.stages + 1):
            x = ad.relu(ad.conv2d(x, self.params[f'stage{i}.w'], self.params[f'stage{i}.b'], stride=2, padding=1))
            features.append(x)
        return features

    def constant_features(self, frames: Union[np.ndarray, Tensor]) -> List[Tensor]:
        with ad.no_grad():
            return self(frames_to_tensor(frames))


_EXTRACTORS: Dict[Tuple, FeatureExtractor] = {}


def default_extractor() -> FeatureExtractor:
    """Shared extractor for the configured widths and seed"""
    key = (tuple(get_setting('losses', 'feature_widths')), int(get_setting('losses', 'feature_seed')))
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = FeatureExtractor(*key)
    return _EXTRACTORS[key]


# ============================================================================
# CONTEXTUAL / GRAM / PERCEPTUAL
# ============================================================================

def contextual_similarity(
    x: Tensor,
    y: Tensor,
    bandwidth: Optional[float] = None,
    epsilon: Optional[float] = None,
    max_positions: Optional[int] = None,
    seed: int = 0,
) -> Tensor:
    """
    CX(X, Y) for feature sets X (N_x×C) and Y (N_y×C)

    Cosine distances after centring on Y's mean, normalized by each x_i's
    nearest distance, turned into row-normalized affinities; CX averages
    over y_j the best affinity any x_i gives it.
    """
    h = float(get_setting('losses', 'cx_bandwidth')) if bandwidth is None else bandwidth
    eps = float(get_setting('losses', 'cx_epsilon')) if epsilon is None else epsilon
    cap = int(get_setting('losses', 'cx_max_positions')) if max_positions is None else max_positions
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"contextual_similarity: shapes {x.shape} and {y.shape} are not conformable")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ShapeError("contextual_similarity: empty feature set")

    rng = np.random.default_rng(seed)
    if x.shape[0] > cap:
        x = ad.take(x, np.sort(rng.choice(x.shape[0], cap, replace=False)), axis=0)
    if y.shape[0] > cap:
        y = ad.take(y, np.sort(rng.choice(y.shape[0], cap, replace=False)), axis=0)
    nx, ny, c = x.shape[0], y.shape[0], x.shape[1]

    mu = ad.mean(y, axis=0, keepdims=True)
    xc = x - ad.expand(mu, (nx, c))
    yc = y - ad.expand(mu, (ny, c))
    xn = xc / ad.expand(ad.sqrt(ad.add_scalar(ad.sum_(xc * xc, axis=1, keepdims=True), eps)), (nx, c))
    yn = yc / ad.expand(ad.sqrt(ad.add_scalar(ad.sum_(yc * yc, axis=1, keepdims=True), eps)), (ny, c))

    cosine = ad.matmul(xn, ad.permute(yn, (1, 0)))
    dist = 1.0 - cosine
    nearest = ad.add_scalar(ad.min_(dist, axis=1, keepdims=True), eps)
    relative = dist / ad.expand(nearest, (nx, ny))
    affinity = ad.exp(ad.mul_scalar(1.0 - relative, 1.0 / h))
    rows = ad.expand(ad.sum_(affinity, axis=1, keepdims=True), (nx, ny))
    normalized = affinity / rows
    return ad.mean(ad.max_(normalized, axis=0))


def feature_positions(feature: Tensor, index: int) -> Tensor:
    """C×H×W map of one batch item → (H·W)×C set"""
    _, c, h, w = feature.shape
    single = ad.reshape(ad.getitem(feature, index), (c, h * w))
    return ad.permute(single, (1, 0))


def gram_matrices(feature: Tensor) -> Tensor:
    """N×C×H×W → N×C×C, normalized by C·H·W"""
    n, c, h, w = feature.shape
    flat = ad.reshape(feature, (n, c, h * w))
    return ad.mul_scalar(ad.matmul(flat, ad.permute(flat, (0, 2, 1))), 1.0 / (c * h * w))


def contextual_term(synth_features: Tensor, target_features: Tensor) -> Tensor:
    """Σ over the batch of −log CX"""
    terms = []
    for i in range(synth_features.shape[0]):
        cx = contextual_similarity(feature_positions(synth_features, i), feature_positions(target_features, i))
        terms.append(ad.reshape(ad.mul_scalar(ad.log(cx), -1.0), (1,)))
    return ad.sum_(ad.concat(terms, axis=0))


def quality_terms(synth: Tensor, target: Union[np.ndarray, Tensor], extractor: FeatureExtractor) -> Dict[str, Tensor]:
    """Perceptual, Gram and contextual terms, each summed over the batch"""
    synth_feats = extractor(synth)
    target_feats = extractor.constant_features(target)
    perceptual, gram = [], []
    for fs, ft in zip(synth_feats, target_feats):
        diff = fs - ft
        perceptual.append(ad.sum_(ad.mean(ad.square(diff), axis=(1, 2, 3))))
        gdiff = gram_matrices(fs) - gram_matrices(ft)
        gram.append(ad.sum_(ad.square(gdiff)))
    return {
        'perceptual': _total(perceptual),
        'gram': _total(gram),
        'contextual': contextual_term(synth_feats[-1], target_feats[-1]),
    }


def _total(scalars: List[Tensor]) -> Tensor:
    return ad.sum_(ad.concat([ad.reshape(s, (1,)) for s in scalars], axis=0))


# ============================================================================
# INNER / OUTER OBJECTIVES
# ============================================================================

def inner_stability(synth: Tensor, aligned: Union[np.ndarray, Tensor]) -> Tensor:
    """
    (1/T)·Σ_t mean(|u| + |v|) of surrogate flow Î_t → Ĩ_t

    L1 over components, not the Euclidean magnitude: a diagonal offset
    counts up to √2 more than an axis-aligned one of the same length, and
    the gradient stays defined at zero flow.
    """
    target = frames_to_tensor(aligned)
    if synth.shape != target.shape:
        raise ShapeError(f"inner_stability: synthesized {synth.shape} vs aligned {target.shape}")
    u, v = surrogate_flow(synth, target)
    return ad.mean(ad.abs_(u) + ad.abs_(v))


def inner_quality(synth: Tensor, aligned: Union[np.ndarray, Tensor], extractor: Optional[FeatureExtractor] = None) -> Tensor:
    extractor = default_extractor() if extractor is None else extractor
    target = frames_to_tensor(aligned)
    if synth.shape != target.shape:
        raise ShapeError(f"inner_quality: synthesized {synth.shape} vs aligned {target.shape}")
    terms = quality_terms(synth, target, extractor)
    return terms['perceptual'] + terms['gram'] + terms['contextual']


def inner_loss(
    net,
    params: ParamVector,
    windows: np.ndarray,
    aligned: np.ndarray,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
) -> LossBreakdown:
    """
    λ_s · inner_stability + λ_p · inner_quality over frames 1..T

    Args:
        net: SynthesisNet
        params: θ
        windows: (T+1)×(2k+1)·3×H×W windows for the task's centre frames
        aligned: (T+1)×H×W×3 aligned frames Ṽ (frame 0 is the reference)
        weights: λ_s, λ_p
    """
    extractor = default_extractor() if extractor is None else extractor
    if windows.shape[0] != aligned.shape[0]:
        raise ShapeError(f"inner_loss: {windows.shape[0]} windows vs {aligned.shape[0]} aligned frames")
    synth = net.forward(params, Tensor(windows[1:]))
    target = frames_to_tensor(aligned[1:])

    stability = inner_stability(synth, target)
    terms = quality_terms(synth, target, extractor)
    quality = terms['perceptual'] + terms['gram'] + terms['contextual']
    total = ad.mul_scalar(stability, weights.lambda_s) + ad.mul_scalar(quality, weights.lambda_p)
    return LossBreakdown(
        total=total,
        stability=stability.item(),
        quality=quality.item(),
        perceptual=terms['perceptual'].item(),
        gram=terms['gram'].item(),
        contextual=terms['contextual'].item(),
        lambda_s=weights.lambda_s,
        lambda_p=weights.lambda_p,
    )


def outer_stability(synth: Tensor, stable: Union[np.ndarray, Tensor]) -> Tensor:
    """Σ_t mean ‖F(Î_t→Î_{t+1}) − F(O_t→O_{t+1})‖²; stable flows are constants"""
    target = frames_to_tensor(stable)
    if synth.shape != target.shape:
        raise ShapeError(f"outer_stability: synthesized {synth.shape} vs stable {target.shape}")
    n = synth.shape[0]
    if n < 2:
        raise ShapeError("outer_stability: need at least two frames")
    head = ad.getitem(synth, slice(0, n - 1))
    tail = ad.getitem(synth, slice(1, n))
    u, v = surrogate_flow(head, tail)
    with ad.no_grad():
        su, sv = surrogate_flow(Tensor(target.data[:-1]), Tensor(target.data[1:]))
    du, dv = u - su, v - sv
    return ad.sum_(ad.mean(ad.square(du) + ad.square(dv), axis=(1, 2)))


def outer_loss(synth: Tensor, stable: Union[np.ndarray, Tensor], extractor: Optional[FeatureExtractor] = None) -> LossBreakdown:
    """outer_stability + Σ_t −log CX(φ_L(Î_t), φ_L(O_t)), weighted 1:1"""
    extractor = default_extractor() if extractor is None else extractor
    target = frames_to_tensor(stable)
    stability = outer_stability(synth, target)
    contextual = contextual_term(extractor(synth)[-1], extractor.constant_features(target)[-1])
    total = stability + contextual
    return LossBreakdown(total=total, stability=stability.item(), contextual=contextual.item())
