"""
Synthesis Network
=================

f_θ: a small residual U-Net that turns a temporal window of 2k+1 frames into
one stable frame, plus sliding-window inference over whole videos.

Windows are laid out as a (2k+1)·3-channel tensor, frames in temporal order,
so the centre frame occupies channels 3k..3k+2. The network predicts a
residual that is added to the centre frame and clamped to [0, 1]; with the
final layer zeroed the network is the identity.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from metastab import autodiff as ad
from metastab.autodiff import ParamVector, Tensor
from metastab.errors import ShapeError
from metastab.frames import FrameSequence, pad_boundary_frames
from metastab.settings_manager import get_setting, resolve_workers

logger = logging.getLogger(__name__)

LAYERS = ('enc1', 'enc2', 'enc3', 'enc4', 'dec1', 'dec2', 'dec3', 'dec4')


@dataclass
class TemporalWindow:
    """S_t = {I_{t−k}, …, I_t, …, I_{t+k}} as a (2k+1)×H×W×3 stack"""

    frames: np.ndarray
    k: int
    center: int = 0
    recurrent: bool = False

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] != 2 * self.k + 1:
            raise ShapeError(
                f"TemporalWindow: expected {2 * self.k + 1} frames for k={self.k}, got shape {self.frames.shape}"
            )

    def to_input(self) -> np.ndarray:
        return window_input(self.frames)


def window_input(frames: np.ndarray) -> np.ndarray:
    """(2k+1)×H×W×3 → (2k+1)·3×H×W"""
    n, h, w, c = frames.shape
    return np.ascontiguousarray(frames.transpose(0, 3, 1, 2).reshape(n * c, h, w))


def build_windows(frames: np.ndarray, k: int, centers: Optional[List[int]] = None) -> np.ndarray:
    """
    Stack the windows centred on each index in centers

    Args:
        frames: N×H×W×3 frames (already padded when boundary frames are needed)
        k: Half window
        centers: Centre indices, default k..N−k−1

    Returns:
        len(centers)×(2k+1)·3×H×W array
    """
    n = frames.shape[0]
    if centers is None:
        centers = list(range(k, n - k))
    for c in centers:
        if c - k < 0 or c + k >= n:
            raise ShapeError(f"build_windows: centre {c} with k={k} outside {n} frames")
    return np.stack([window_input(frames[c - k:c + k + 1]) for c in centers]).astype(ad.get_default_dtype())


class SynthesisNet:
    """Encoder-decoder with skip connections; parameters live in a ParamVector"""

    def __init__(self, k: int = 2, base_width: int = 32, leaky_slope: float = 0.1):
        if k < 0:
            raise ShapeError(f"SynthesisNet: k must be ≥ 0, got {k}")
        self.k = k
        self.base_width = base_width
        self.leaky_slope = leaky_slope

    @property
    def in_channels(self) -> int:
        return (2 * self.k + 1) * 3

    def layer_shapes(self) -> Dict[str, tuple]:
        w, c = self.base_width, self.in_channels
        return {
            'enc1': (w, c), 'enc2': (2 * w, w), 'enc3': (2 * w, 2 * w), 'enc4': (2 * w, 2 * w),
            'dec1': (2 * w, 2 * w), 'dec2': (w, 4 * w), 'dec3': (w, 2 * w), 'dec4': (3, w),
        }

    def init_parameters(self, seed: int = 0, zero_residual: bool = True) -> ParamVector:
        """He-normal convolutions; dec4 zeroed when zero_residual"""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, (out_ch, in_ch) in self.layer_shapes().items():
            std = math.sqrt(2.0 / (in_ch * 9))
            weight = rng.standard_normal((out_ch, in_ch, 3, 3)) * std
            if name == 'dec4':
                weight = np.zeros_like(weight) if zero_residual else weight * 0.1
            arrays[f'{name}.w'] = weight
            arrays[f'{name}.b'] = np.zeros(out_ch)
        return ParamVector.from_arrays(arrays)

    @classmethod
    def from_parameters(cls, arrays: Dict[str, np.ndarray], leaky_slope: float = 0.1) -> 'SynthesisNet':
        """Infer k and base width from stored parameter shapes"""
        try:
            width, in_ch = arrays['enc1.w'].shape[:2]
        except KeyError as e:
            raise ShapeError("synthesis parameters missing 'enc1.w'") from e
        if in_ch % 3 or (in_ch // 3) % 2 == 0:
            raise ShapeError(f"enc1.w has {in_ch} input channels; expected (2k+1)·3")
        net = cls(k=(in_ch // 3 - 1) // 2, base_width=width, leaky_slope=leaky_slope)
        for name, (out_ch, in_c) in net.layer_shapes().items():
            shape = arrays.get(f'{name}.w', np.empty(0)).shape
            if shape != (out_ch, in_c, 3, 3):
                raise ShapeError(f"{name}.w has shape {shape}, expected {(out_ch, in_c, 3, 3)}")
        return net

    def num_parameters(self) -> int:
        return sum(o * i * 9 + o for o, i in self.layer_shapes().values())

    def _conv(self, params, name, x, stride=1, activate=True):
        out = ad.conv2d(x, params[f'{name}.w'], params[f'{name}.b'], stride=stride, padding=1)
        return ad.leaky_relu(out, self.leaky_slope) if activate else out

    def forward(self, params: ParamVector, x: Tensor) -> Tensor:
        """
        N×(2k+1)·3×H×W windows → N×3×H×W frames

        Sizes not divisible by 4 are edge-padded internally and cropped back.
        """
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"SynthesisNet.forward: expected N×{self.in_channels}×H×W, got {x.shape}")
        n, _, h, w = x.shape
        pad_h, pad_w = (-h) % 4, (-w) % 4
        if pad_h or pad_w:
            x = ad.edge_pad(x, (0, pad_h, 0, pad_w))

        e1 = self._conv(params, 'enc1', x)
        e2 = self._conv(params, 'enc2', e1, stride=2)
        e3 = self._conv(params, 'enc3', e2, stride=2)
        e4 = self._conv(params, 'enc4', e3)
        d1 = self._conv(params, 'dec1', e4)
        d2 = self._conv(params, 'dec2', ad.concat([ad.upsample2x(d1), e2], axis=1))
        d3 = self._conv(params, 'dec3', ad.concat([ad.upsample2x(d2), e1], axis=1))
        residual = self._conv(params, 'dec4', d3, activate=False)

        center = ad.getitem(x, (slice(None), slice(3 * self.k, 3 * self.k + 3)))
        out = ad.clamp(center + residual, 0.0, 1.0)
        if pad_h or pad_w:
            out = ad.getitem(out, (slice(None), slice(None), slice(0, h), slice(0, w)))
        return out


def synthesize(window: TemporalWindow, net: SynthesisNet, params: ParamVector) -> np.ndarray:
    """Î_t = f_θ(S_t) as an H×W×3 array"""
    if window.k != net.k:
        raise ShapeError(f"synthesize: window has k={window.k}, network expects k={net.k}")
    with ad.no_grad():
        out = net.forward(params, Tensor(window.to_input()[None]))
    return out.data[0].transpose(1, 2, 0)


def stabilize_video(
    seq: FrameSequence,
    net: SynthesisNet,
    params: ParamVector,
    recurrent: bool = False,
    workers: Optional[int] = None,
    batch_windows: Optional[int] = None,
    padded: bool = False,
) -> FrameSequence:
    """
    Sliding-window synthesis over a whole video; |V̂| = |V|

    Args:
        seq: Input video; boundary frames are replicated unless padded=True
        net, params: f_θ
        recurrent: Feed Î_{t−1}, …, Î_{t−k} into the leading window slots
        workers: Threads for independent (non-recurrent) window batches
        batch_windows: Windows per forward pass
        padded: seq already carries k replicated frames at each end
    """
    k = net.k
    batch_windows = int(get_setting('synthesis', 'batch_windows', 8)) if batch_windows is None else batch_windows
    padded_seq = seq if padded else pad_boundary_frames(seq, k)
    frames = padded_seq.data
    n_out = frames.shape[0] - 2 * k
    if n_out < 1:
        raise ShapeError(f"stabilize_video: {frames.shape[0]} padded frames too few for k={k}")

    if recurrent:
        synthesized: List[np.ndarray] = []
        with ad.no_grad():
            for i in range(n_out):
                window = frames[i:i + 2 * k + 1].copy()
                for slot in range(k):
                    source = i + slot - k
                    if source >= 0:
                        window[slot] = synthesized[source]
                out = net.forward(params, Tensor(window_input(window)[None]))
                synthesized.append(out.data[0].transpose(1, 2, 0))
        result = np.stack(synthesized)
    else:
        starts = list(range(0, n_out, batch_windows))

        def run(start: int) -> np.ndarray:
            centers = list(range(start + k, min(start + batch_windows, n_out) + k))
            with ad.no_grad():
                out = net.forward(params, Tensor(build_windows(frames, k, centers)))
            return out.data.transpose(0, 2, 3, 1)

        with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
            result = np.concatenate(list(pool.map(run, starts)))

    logger.debug("Stabilized %d frames (k=%d, recurrent=%s)", n_out, k, recurrent)
    return FrameSequence(np.clip(result, 0.0, 1.0).astype(np.float32), role='synthesized', start_index=seq.start_index)
