"""
Synthetic Data
==============

Stable/unstable training pairs with known ground truth.

A procedural scene is rendered on an oversize canvas (multi-scale noise
background plus textured sprites that move on their own). The stable video
follows a smooth sinusoidal camera path; the unstable video adds a per-frame
rigid jitter on top. Both are centre crops of the warped canvas, so they share
content exactly and the jitter is recoverable from the stored transforms.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from metastab.errors import SyntheticDataError
from metastab.frames import FrameSequence
from metastab.settings_manager import get_setting
from metastab.transforms import RigidTransform, image_center, warp_array

logger = logging.getLogger(__name__)


@dataclass
class ShakeProfile:
    """Jitter law (AR(1) walk) and smooth camera path law"""

    rotation_std: float = 0.004
    translation_std: float = 1.5
    smooth_amplitude: Tuple[float, float, float] = (4.0, 3.0, 0.01)  # tx px, ty px, theta rad
    smooth_period: Tuple[float, float, float] = (64.0, 96.0, 128.0)  # frames
    jitter_correlation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rotation_std < 0 or self.translation_std < 0:
            raise SyntheticDataError(
                f"ShakeProfile std values must be ≥ 0 (rotation {self.rotation_std}, translation {self.translation_std})"
            )
        if not 0.0 <= self.jitter_correlation <= 1.0:
            raise SyntheticDataError(f"jitter_correlation must lie in [0, 1], got {self.jitter_correlation}")
        if any(p <= 0 for p in self.smooth_period):
            raise SyntheticDataError(f"smooth_period entries must be positive, got {self.smooth_period}")
        self.smooth_amplitude = tuple(float(a) for a in self.smooth_amplitude)
        self.smooth_period = tuple(float(p) for p in self.smooth_period)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['smooth_amplitude'] = list(self.smooth_amplitude)
        data['smooth_period'] = list(self.smooth_period)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ShakeProfile':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def still(cls, seed: int = 0) -> 'ShakeProfile':
        """Zero jitter, zero smooth motion"""
        return cls(0.0, 0.0, (0.0, 0.0, 0.0), (64.0, 96.0, 128.0), 0.5, seed)


@dataclass
class ProceduralScene:
    """Canvas frames (N×Hc×Wc×3), independent-motion masks and the output size"""

    canvas: np.ndarray
    object_masks: np.ndarray
    height: int
    width: int

    def __len__(self) -> int:
        return self.canvas.shape[0]


@dataclass
class SyntheticPair:
    stable: FrameSequence
    unstable: FrameSequence
    smooth_path: List[RigidTransform]
    jitter: List[RigidTransform]
    object_masks: np.ndarray
    profile: ShakeProfile
    video_id: str = 'video'
    metadata: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.stable)


# ============================================================================
# PROCEDURAL SCENE
# ============================================================================

def _texture(rng: np.random.Generator, height: int, width: int, sigmas=(1.0, 3.0, 8.0)) -> np.ndarray:
    """Colored multi-scale noise in [0.1, 0.9]"""
    layers = []
    for _ in range(3):
        acc = np.zeros((height, width))
        for weight, sigma in zip((0.5, 1.0, 1.5), sigmas):
            acc += weight * ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma, mode='wrap')
        layers.append(acc)
    tex = np.stack(layers, axis=-1)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    return 0.1 + 0.8 * tex


def _sprite_mask(kind: str, height: int, width: int) -> np.ndarray:
    img = Image.new('L', (width, height), 0)
    draw = ImageDraw.Draw(img)
    if kind == 'ellipse':
        draw.ellipse([0, 0, width - 1, height - 1], fill=255)
    else:
        draw.rectangle([0, 0, width - 1, height - 1], fill=255)
    return np.asarray(img) > 127


def render_procedural_scene(
    frames: int,
    height: int,
    width: int,
    seed: int = 0,
    sprites: int = 2,
    margin: Optional[float] = None,
) -> ProceduralScene:
    """
    Render a textured background with independently moving sprites

    Args:
        frames: Frame count
        height, width: Output (cropped) frame size
        seed: Random seed; identical seeds give identical scenes
        sprites: Number of moving sprites, each about 0.3H × 0.3W
        margin: Canvas margin per side as a fraction of the frame size

    Returns:
        ProceduralScene whose canvas is larger than the output by the margin
    """
    if margin is None:
        margin = float(get_setting('synthetic', 'canvas_margin', 0.25))
    rng = np.random.default_rng(seed)
    pad_y, pad_x = int(round(margin * height)), int(round(margin * width))
    ch, cw = height + 2 * pad_y, width + 2 * pad_x
    background = _texture(rng, ch, cw)

    sprite_specs = []
    for i in range(sprites):
        sh, sw = max(4, int(0.3 * height)), max(4, int(0.3 * width))
        kind = 'ellipse' if i % 2 == 0 else 'rectangle'
        tex = _texture(rng, sh, sw, sigmas=(0.7, 1.5, 3.0))
        tex = np.clip(1.0 - tex, 0.05, 0.95)
        x0 = rng.uniform(pad_x, pad_x + width - sw)
        y0 = rng.uniform(pad_y, pad_y + height - sh)
        speed = rng.uniform(1.0, 2.0)
        angle = rng.uniform(0, 2 * math.pi)
        sprite_specs.append((_sprite_mask(kind, sh, sw), tex, x0, y0, speed * math.cos(angle), speed * math.sin(angle)))

    canvas = np.repeat(background[None], frames, axis=0)
    masks = np.zeros((frames, ch, cw), dtype=bool)
    for mask, tex, x, y, vx, vy in sprite_specs:
        sh, sw = mask.shape
        for t in range(frames):
            xi, yi = int(round(x)), int(round(y))
            region = canvas[t, yi:yi + sh, xi:xi + sw]
            region[mask] = tex[mask]
            masks[t, yi:yi + sh, xi:xi + sw] |= mask
            # bounce inside the visible window
            x, y = x + vx, y + vy
            if x < pad_x or x > pad_x + width - sw:
                vx = -vx
                x = min(max(x, pad_x), pad_x + width - sw)
            if y < pad_y or y > pad_y + height - sh:
                vy = -vy
                y = min(max(y, pad_y), pad_y + height - sh)

    return ProceduralScene(canvas.astype(np.float32), masks, height, width)


# ============================================================================
# CAMERA PATHS
# ============================================================================

def smooth_path(profile: ShakeProfile, frames: int, center: Tuple[float, float]) -> List[RigidTransform]:
    """Sinusoidal camera path; phases drawn from the profile seed"""
    rng = np.random.default_rng(profile.seed + 1)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    ax, ay, ar = profile.smooth_amplitude
    px, py, pr = profile.smooth_period
    path = []
    for t in range(frames):
        path.append(RigidTransform(
            ar * math.sin(2 * math.pi * t / pr + phases[2]) if ar else 0.0,
            ax * math.sin(2 * math.pi * t / px + phases[0]) if ax else 0.0,
            ay * math.sin(2 * math.pi * t / py + phases[1]) if ay else 0.0,
            center,
        ))
    return path


def jitter_path(profile: ShakeProfile, frames: int, center: Tuple[float, float]) -> List[RigidTransform]:
    """AR(1) rigid jitter; correlation 1.0 is a pure random walk"""
    rng = np.random.default_rng(profile.seed)
    rho = profile.jitter_correlation
    state = np.zeros(3)
    jitter = []
    for _ in range(frames):
        noise = rng.standard_normal(3) * np.array([profile.rotation_std, profile.translation_std, profile.translation_std])
        state = rho * state + noise
        jitter.append(RigidTransform(float(state[0]), float(state[1]), float(state[2]), center))
    return jitter


def _max_corner_displacement(transform: RigidTransform, height: int, width: int,
                             offset: Tuple[int, int] = (0, 0)) -> float:
    """Largest corner motion of the output window, which sits at offset (top, left) on the canvas"""
    top, left = offset
    xs = np.array([0.0, width - 1, 0.0, width - 1]) + left
    ys = np.array([0.0, 0.0, height - 1, height - 1]) + top
    px, py = transform.apply(xs, ys)
    return float(np.max(np.hypot(px - xs, py - ys)))


def _center_crop(frame: np.ndarray, height: int, width: int) -> np.ndarray:
    ch, cw = frame.shape[:2]
    top, left = (ch - height) // 2, (cw - width) // 2
    return frame[top:top + height, left:left + width]


def synthesize_pair(
    source: Union[FrameSequence, ProceduralScene],
    profile: ShakeProfile,
    min_frames: int = 1,
    video_id: str = 'video',
    max_out_of_frame: Optional[float] = None,
) -> SyntheticPair:
    """
    Build a stable/unstable pair from a source and a shake profile

    Args:
        source: Existing frames or a procedural scene
        profile: Jitter and smooth-path law
        min_frames: Required source length (T + 2k for training tasks)
        video_id: Identifier stored on the pair
        max_out_of_frame: Largest allowed corner displacement as a fraction of the frame size

    Returns:
        SyntheticPair with ground-truth smooth path, jitter and object masks
    """
    if max_out_of_frame is None:
        max_out_of_frame = float(get_setting('synthetic', 'max_out_of_frame', 0.40))
    if isinstance(source, FrameSequence):
        canvas, masks = source.data, np.zeros(source.data.shape[:3], dtype=bool)
        height, width = source.height, source.width
    else:
        canvas, masks = source.canvas, source.object_masks
        height, width = source.height, source.width

    n = canvas.shape[0]
    if n < min_frames:
        raise SyntheticDataError(f"source has {n} frames, need at least {min_frames}")

    canvas_center = image_center(*canvas.shape[1:3])
    window = ((canvas.shape[1] - height) // 2, (canvas.shape[2] - width) // 2)
    stable_path = smooth_path(profile, n, canvas_center)
    jitter = jitter_path(profile, n, canvas_center)

    limit = max_out_of_frame * min(height, width)
    for t, (s, j) in enumerate(zip(stable_path, jitter)):
        moved = _max_corner_displacement(j.compose(s), height, width, window)
        if moved > limit:
            raise SyntheticDataError(
                f"frame {t}: warped content moves {moved:.1f} px, beyond {max_out_of_frame:.0%} of the frame"
            )

    stable, unstable, object_masks = [], [], []
    for t in range(n):
        shaken = jitter[t].compose(stable_path[t])
        stable.append(_center_crop(warp_array(canvas[t], stable_path[t]), height, width))
        unstable.append(_center_crop(warp_array(canvas[t], shaken), height, width))
        warped_mask = warp_array(masks[t].astype(np.float32), shaken)
        object_masks.append(_center_crop(warped_mask, height, width) > 0.5)

    # express transforms about the output frame centre; identical because crops are centred
    out_center = image_center(height, width)

    def recenter(ts: List[RigidTransform]) -> List[RigidTransform]:
        return [RigidTransform(t.theta, t.tx, t.ty, out_center) for t in ts]

    logger.debug("Synthesized pair %s: %d frames at %d×%d", video_id, n, width, height)
    return SyntheticPair(
        stable=FrameSequence(np.clip(np.stack(stable), 0, 1), role='stable'),
        unstable=FrameSequence(np.clip(np.stack(unstable), 0, 1), role='unstable'),
        smooth_path=recenter(stable_path),
        jitter=recenter(jitter),
        object_masks=np.stack(object_masks),
        profile=profile,
        video_id=video_id,
    )


def make_dataset(
    count: int,
    frames: int,
    height: int,
    width: int,
    profile: ShakeProfile,
    sprites: Optional[int] = None,
) -> List[SyntheticPair]:
    """count pairs with scene and jitter seeds derived from profile.seed"""
    if sprites is None:
        sprites = int(get_setting('synthetic', 'sprites', 2))
    pairs = []
    for i in range(count):
        seed = profile.seed * 1000 + i
        scene = render_procedural_scene(frames, height, width, seed=seed, sprites=sprites)
        video_profile = ShakeProfile(**{**profile.to_dict(), 'seed': seed})
        pairs.append(synthesize_pair(scene, video_profile, video_id=f"video_{i:03d}"))
    return pairs
