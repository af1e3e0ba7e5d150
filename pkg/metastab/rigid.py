"""
Rigid Alignment
===============

Warp operator, the learned rigid regressor h_φ and sequence alignment.

The regressor reads a flow field resampled to a fixed 32×32 grid
(translations normalized by half the frame size plus one rotational-moment
channel), runs three stride-2 convolutions, global average pooling and a dense
head, and predicts (theta, tx, ty). Translations are rescaled to pixels of the
input frame so the same weights serve any resolution.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from metastab import autodiff as ad
from metastab.autodiff import Adam, ParamVector, Tensor
from metastab.errors import FlowEstimationError, ShapeError, TrainingDivergedError
from metastab.flow import FlowField, global_flow
from metastab.frames import Frame, FrameSequence, as_array
from metastab.settings_manager import get_setting
from metastab.transforms import RigidTransform, image_center, pixel_grid, warp_array

logger = logging.getLogger(__name__)

THETA_SCALE = 0.1  # network output unit for rotation, radians


# ============================================================================
# WARP
# ============================================================================

def warp(frame: Union[Frame, np.ndarray, Tensor], transform: RigidTransform):
    """
    Inverse-mapped bilinear warp with edge replication

    Arrays and Frames are warped with numpy; a 1×C×H×W Tensor is warped with
    differentiable sampling so gradients reach its pixels.
    """
    if isinstance(frame, Tensor):
        return warp_tensor(frame, [transform])
    if isinstance(frame, Frame):
        return Frame(warp_array(frame.data, transform), frame.index)
    return warp_array(np.asarray(frame), transform)


def warp_tensor(images: Tensor, transforms: Sequence[RigidTransform]) -> Tensor:
    """Warp each N×C×H×W image by its own transform"""
    n, _, h, w = images.shape
    if len(transforms) != n:
        raise ShapeError(f"warp_tensor: {len(transforms)} transforms for batch of {n}")
    xs, ys = pixel_grid(h, w)
    coords_x = np.empty((n, h, w))
    coords_y = np.empty((n, h, w))
    for i, t in enumerate(transforms):
        coords_x[i], coords_y[i] = t.inverse().apply(xs, ys)
    return ad.bilinear_sample(images, Tensor(coords_x), Tensor(coords_y))


# ============================================================================
# REGRESSOR
# ============================================================================

def encode_flow(u: np.ndarray, v: np.ndarray, size: int = 32) -> np.ndarray:
    """
    Resample a flow to size×size: normalized (u, v) and x·v − y·u

    Returns:
        3×size×size array
    """
    h, w = u.shape
    gy = np.linspace(0, h - 1, size)
    gx = np.linspace(0, w - 1, size)
    yy, xx = np.meshgrid(gy, gx, indexing='ij')
    su = ndimage.map_coordinates(u.astype(np.float64), [yy, xx], order=1, mode='nearest')
    sv = ndimage.map_coordinates(v.astype(np.float64), [yy, xx], order=1, mode='nearest')
    hx, hy = w / 2.0, h / 2.0
    cx, cy = image_center(h, w)
    nu, nv = su / hx, sv / hy
    nx, ny = (xx - cx) / hx, (yy - cy) / hy
    return np.stack([nu, nv, nx * nv - ny * nu])


class AffineRegressor:
    """h_φ: flow field → RigidTransform"""

    def __init__(self, params: ParamVector, input_size: int = 32, leaky_slope: float = 0.1):
        self.params = params
        self.input_size = input_size
        self.leaky_slope = leaky_slope

    @staticmethod
    def init_parameters(widths: Sequence[int] = (16, 32, 32), seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        arrays: Dict[str, np.ndarray] = {}
        in_ch = 3
        for i, width in enumerate(widths, start=1):
            fan_in = in_ch * 9
            arrays[f'conv{i}.w'] = rng.standard_normal((width, in_ch, 3, 3)) * math.sqrt(2.0 / fan_in)
            arrays[f'conv{i}.b'] = np.zeros(width)
            in_ch = width
        arrays['head.w'] = rng.standard_normal((in_ch, 3)) * math.sqrt(1.0 / in_ch)
        arrays['head.b'] = np.zeros(3)
        return ParamVector.from_arrays(arrays)

    @classmethod
    def create(cls, widths: Optional[Sequence[int]] = None, seed: int = 0, input_size: Optional[int] = None) -> 'AffineRegressor':
        widths = tuple(get_setting('regressor', 'widths')) if widths is None else tuple(widths)
        input_size = int(get_setting('regressor', 'input_size')) if input_size is None else input_size
        return cls(cls.init_parameters(widths, seed), input_size=input_size)

    @classmethod
    def from_parameters(cls, arrays: Dict[str, np.ndarray]) -> 'AffineRegressor':
        missing = [name for name in ('head.w', 'head.b', 'conv1.w') if name not in arrays]
        if missing:
            raise ShapeError(f"regressor parameters missing {missing}")
        ordered = {name: arrays[name] for name in sorted(arrays, key=lambda n: (n.startswith('head'), n))}
        return cls(ParamVector.from_arrays(ordered))

    @property
    def depth(self) -> int:
        return sum(1 for name in self.params if name.endswith('.w') and name.startswith('conv'))

    def forward(self, params: ParamVector, x: Tensor) -> Tensor:
        """x: N×3×S×S encoded flows → N×3 raw outputs"""
        h = x
        for i in range(1, self.depth + 1):
            h = ad.conv2d(h, params[f'conv{i}.w'], params[f'conv{i}.b'], stride=2, padding=1)
            h = ad.leaky_relu(h, self.leaky_slope)
        pooled = ad.mean(h, axis=(2, 3))
        return ad.linear(pooled, params['head.w'], params['head.b'])

    def predict_batch(self, encoded: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(self.params, Tensor(encoded)).data.astype(np.float64)

    def predict(self, flow: Union[FlowField, Tuple[np.ndarray, np.ndarray]]) -> RigidTransform:
        u, v = (flow.u, flow.v) if isinstance(flow, FlowField) else flow
        h, w = u.shape
        raw = self.predict_batch(encode_flow(u, v, self.input_size)[None])[0]
        return decode_output(raw, h, w)


def decode_output(raw: np.ndarray, height: int, width: int) -> RigidTransform:
    theta = float(np.clip(raw[0] * THETA_SCALE, -1.5, 1.5))
    return RigidTransform(theta, float(raw[1] * width / 2.0), float(raw[2] * height / 2.0), image_center(height, width))


def encode_target(t: RigidTransform, height: int, width: int) -> np.ndarray:
    return np.array([t.theta / THETA_SCALE, t.tx / (width / 2.0), t.ty / (height / 2.0)])


def sample_rigid(rng: np.random.Generator, theta_range_deg: float, translation_range: float,
                 center: Tuple[float, float]) -> RigidTransform:
    theta = math.radians(rng.uniform(-theta_range_deg, theta_range_deg))
    tx, ty = rng.uniform(-translation_range, translation_range, size=2)
    return RigidTransform(theta, float(tx), float(ty), center)


def _training_pool(samples: int, frame_size: int, source: str, noise: float, seed: int,
                   theta_range_deg: float, translation_range: float, input_size: int):
    from metastab.synthetic import render_procedural_scene

    rng = np.random.default_rng(seed)
    center = image_center(frame_size, frame_size)
    inputs, targets = [], []
    scene = None
    if source == 'estimated':
        scene = render_procedural_scene(samples, frame_size, frame_size, seed=seed, sprites=0, margin=0.0)
    elif source != 'analytic':
        raise ValueError(f"Unknown regressor flow source '{source}'")

    for i in range(samples):
        t = sample_rigid(rng, theta_range_deg, translation_range, center)
        if scene is None:
            u, v = t.flow(frame_size, frame_size)
            u = u + rng.normal(0, noise, u.shape)
            v = v + rng.normal(0, noise, v.shape)
        else:
            frame = scene.canvas[i]
            try:
                field = global_flow(frame, warp_array(frame, t))
            except FlowEstimationError:
                logger.debug("Skipping regressor sample %d: flow estimation failed", i)
                continue
            u, v = field.u, field.v
        inputs.append(encode_flow(u, v, input_size))
        targets.append(encode_target(t, frame_size, frame_size))
    return np.stack(inputs), np.stack(targets)


@dataclass
class RegressorTrainingResult:
    regressor: AffineRegressor
    losses: List[float]
    initial_loss: float
    final_loss: float


def train_affine_regressor(
    steps: Optional[int] = None,
    batch_size: Optional[int] = None,
    learning_rate: Optional[float] = None,
    samples: Optional[int] = None,
    frame_size: Optional[int] = None,
    flow_source: Optional[str] = None,
    seed: int = 0,
    regressor: Optional[AffineRegressor] = None,
    progress: bool = False,
) -> RegressorTrainingResult:
    """
    Pretrain h_φ on flows of random rigid warps

    Warps are sampled uniformly with theta in ±theta_range_deg and each
    translation in ±translation_range px; flows are either analytic (plus
    noise) or estimated with global_flow on warped procedural frames.

    Raises:
        TrainingDivergedError: loss after 20% of steps exceeds the initial loss
    """
    cfg = {key: get_setting('regressor', key) for key in (
        'steps', 'batch_size', 'learning_rate', 'samples', 'frame_size', 'flow_source',
        'flow_noise', 'theta_range_deg', 'translation_range', 'input_size', 'widths')}
    steps = cfg['steps'] if steps is None else steps
    batch_size = cfg['batch_size'] if batch_size is None else batch_size
    learning_rate = cfg['learning_rate'] if learning_rate is None else learning_rate
    samples = cfg['samples'] if samples is None else samples
    frame_size = cfg['frame_size'] if frame_size is None else frame_size
    flow_source = cfg['flow_source'] if flow_source is None else flow_source

    inputs, targets = _training_pool(
        samples, frame_size, flow_source, cfg['flow_noise'], seed,
        cfg['theta_range_deg'], cfg['translation_range'], cfg['input_size'],
    )
    if regressor is None:
        regressor = AffineRegressor.create(cfg['widths'], seed=seed, input_size=cfg['input_size'])
    optimizer = Adam(regressor.params, lr=learning_rate)
    rng = np.random.default_rng(seed + 7)

    def batch_loss(idx):
        pred = regressor.forward(regressor.params, Tensor(inputs[idx]))
        return ad.mean(ad.square(pred - Tensor(targets[idx])))

    with ad.no_grad():
        initial = batch_loss(np.arange(len(inputs))).item()
    checkpoint = max(1, int(math.ceil(0.2 * steps)))
    losses: List[float] = []

    for step in tqdm(range(1, steps + 1), desc='train-affine', disable=not progress):
        idx = rng.choice(len(inputs), size=min(batch_size, len(inputs)), replace=False)
        loss = batch_loss(idx)
        ad.backward(loss)
        optimizer.step()
        losses.append(loss.item())
        if step == checkpoint:
            with ad.no_grad():
                current = batch_loss(np.arange(len(inputs))).item()
            if not np.isfinite(current) or current > initial:
                raise TrainingDivergedError(
                    f"train_affine_regressor: loss {current:.4g} after {step} steps exceeds initial {initial:.4g}"
                )

    with ad.no_grad():
        final = batch_loss(np.arange(len(inputs))).item()
    logger.info("Affine regressor trained: loss %.4g -> %.4g over %d steps", initial, final, steps)
    return RegressorTrainingResult(regressor, losses, initial, final)


def evaluate_regressor(
    regressor: AffineRegressor,
    count: int = 100,
    frame_size: int = 64,
    seed: int = 1,
    noise: float = 0.0,
) -> Dict[str, float]:
    """Mean |Δtheta| (degrees) and |Δt| (px) on analytic held-out warps"""
    rng = np.random.default_rng(seed)
    center = image_center(frame_size, frame_size)
    theta_range = float(get_setting('regressor', 'theta_range_deg'))
    trans_range = float(get_setting('regressor', 'translation_range'))
    theta_err, trans_err = [], []
    for _ in range(count):
        t = sample_rigid(rng, theta_range, trans_range, center)
        u, v = t.flow(frame_size, frame_size)
        if noise:
            u = u + rng.normal(0, noise, u.shape)
            v = v + rng.normal(0, noise, v.shape)
        p = regressor.predict((u, v))
        theta_err.append(abs(math.degrees(p.theta - t.theta)))
        trans_err.append(0.5 * (abs(p.tx - t.tx) + abs(p.ty - t.ty)))
    return {'theta_deg': float(np.mean(theta_err)), 'translation_px': float(np.mean(trans_err))}


# ============================================================================
# SEQUENCE ALIGNMENT
# ============================================================================

@dataclass
class AlignedSequence:
    """Ṽ: frames aligned to the first frame and the transforms that did it"""

    frames: np.ndarray
    transforms: List[RigidTransform]
    fitted: List[RigidTransform]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def as_sequence(self) -> FrameSequence:
        return FrameSequence(np.clip(self.frames, 0, 1), role='aligned')


def align_sequence(
    seq: Union[FrameSequence, np.ndarray],
    regressor: Optional[AffineRegressor] = None,
) -> AlignedSequence:
    """
    Align frames 1..T to frame 0

    The motion I_0 → I_t is estimated from global_flow, by h_φ when given and
    by the Procrustes fit otherwise; Ĩ_t = warp(I_t, motion⁻¹). Frame 0 is
    returned unchanged.
    """
    frames = seq.data if isinstance(seq, FrameSequence) else np.asarray(seq, dtype=np.float32)
    if frames.shape[0] < 2:
        raise ShapeError(f"align_sequence: need T ≥ 1, got {frames.shape[0]} frames")
    h, w = frames.shape[1:3]
    reference = frames[0]
    aligned = [reference]
    transforms = [RigidTransform.identity(image_center(h, w))]
    fitted = [RigidTransform.identity(image_center(h, w))]
    for t in range(1, frames.shape[0]):
        field = global_flow(reference, frames[t])
        motion = regressor.predict(field) if regressor is not None else field.rigid
        correction = motion.inverse()
        aligned.append(warp_array(frames[t], correction))
        transforms.append(correction)
        fitted.append(motion)
    return AlignedSequence(np.stack(aligned).astype(np.float32), transforms, fitted)
