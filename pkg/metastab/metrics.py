"""
Metrics
=======

Stability, cropping and distortion scores for a stabilized video.

Stability: inter-frame rigid motion (Procrustes on global flow) is
accumulated into a camera path; for each of tx, ty and theta the share of
non-DC spectral energy in low-frequency bins 2..6 is taken, and the three
shares are averaged (or the minimum taken).

Cropping and distortion: per frame, a 6-DoF affine fitted from dense flow
between the original and stabilized frame; cropping = min(1, 1/scale) with
scale = sqrt(|det A|), distortion = σ_min / σ_max of A.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from metastab.errors import AlignmentError, FlowEstimationError, MetricError
from metastab.flow import FlowField, dense_flow, global_flow
from metastab.frames import FrameSequence
from metastab.settings_manager import get_setting, resolve_workers
from metastab.transforms import AffineTransform, RigidTransform, fit_affine, fit_rigid_procrustes

logger = logging.getLogger(__name__)

ENERGY_FLOOR = 1e-12
REDUCTIONS = ('mean', 'min')


@dataclass
class CameraPath:
    """Accumulated inter-frame motion, one entry per frame (frame 0 at zero)"""

    tx: np.ndarray
    ty: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_transforms(cls, transforms: Sequence[RigidTransform]) -> 'CameraPath':
        params = np.array([[t.tx, t.ty, t.theta] for t in transforms], dtype=np.float64).reshape(-1, 3)
        path = np.vstack([np.zeros((1, 3)), np.cumsum(params, axis=0)])
        if not np.all(np.isfinite(path)):
            raise MetricError("camera path contains non-finite values")
        return cls(path[:, 0], path[:, 1], path[:, 2])

    def __len__(self) -> int:
        return self.tx.shape[0]

    def channels(self) -> Dict[str, np.ndarray]:
        return {'tx': self.tx, 'ty': self.ty, 'theta': self.theta}


def global_flows(video: FrameSequence, workers: Optional[int] = None) -> List[FlowField]:
    """Global flow t → t+1 for every consecutive pair"""

    def estimate(t: int) -> FlowField:
        try:
            return global_flow(video.data[t], video.data[t + 1])
        except (FlowEstimationError, AlignmentError) as e:
            raise MetricError(f"transform fit failed between frames {t} and {t + 1}: {e}") from e

    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        return list(pool.map(estimate, range(len(video) - 1)))


def path_transform(flow: FlowField, t: int = 0) -> RigidTransform:
    """Uniform-weight Procrustes fit of a global flow (outliers already replaced)"""
    try:
        return fit_rigid_procrustes(flow.u, flow.v)
    except AlignmentError as e:
        raise MetricError(f"transform fit failed between frames {t} and {t + 1}: {e}") from e


def interframe_transforms(
    video: FrameSequence,
    workers: Optional[int] = None,
    flows: Optional[Sequence[FlowField]] = None,
) -> List[RigidTransform]:
    """Rigid motion t → t+1 for every consecutive pair, from precomputed flows when given"""
    flows = global_flows(video, workers) if flows is None else flows
    if len(flows) != len(video) - 1:
        raise MetricError(f"{len(flows)} flows for a {len(video)}-frame video")
    return [path_transform(f, t) for t, f in enumerate(flows)]


def camera_path(video: FrameSequence, workers: Optional[int] = None,
                flows: Optional[Sequence[FlowField]] = None) -> CameraPath:
    return CameraPath.from_transforms(interframe_transforms(video, workers, flows))


def low_frequency_ratio(signal: np.ndarray, bins: Tuple[int, int] = (2, 6)) -> float:
    """Energy of DFT bins lo..hi over all non-DC energy; 1.0 when there is none"""
    spectrum = np.abs(np.fft.rfft(np.asarray(signal, dtype=np.float64))) ** 2
    non_dc = spectrum[1:].sum()
    if non_dc <= ENERGY_FLOOR * max(1, spectrum.size):
        return 1.0
    lo, hi = bins
    return float(spectrum[lo:hi + 1].sum() / non_dc)


def path_stability(path: CameraPath, bins: Tuple[int, int] = (2, 6), reduce: str = 'mean') -> Tuple[float, Dict[str, float]]:
    if reduce not in REDUCTIONS:
        raise MetricError(f"Unknown reduction '{reduce}'; expected one of {REDUCTIONS}")
    ratios = {name: low_frequency_ratio(values, bins) for name, values in path.channels().items()}
    values = list(ratios.values())
    score = float(np.mean(values)) if reduce == 'mean' else float(np.min(values))
    return score, ratios


def stability_score(
    video: FrameSequence,
    reduce: Optional[str] = None,
    workers: Optional[int] = None,
    return_channels: bool = False,
    flows: Optional[Sequence[FlowField]] = None,
):
    """
    Low-frequency share of camera-path energy, in [0, 1]

    Raises:
        MetricError: fewer than metrics.min_frames frames, or a pair could not be fitted
    """
    reduce = get_setting('metrics', 'stability_reduce', 'mean') if reduce is None else reduce
    min_frames = int(get_setting('metrics', 'min_frames', 32))
    bins = tuple(get_setting('metrics', 'stability_bins', (2, 6)))
    if len(video) < min_frames:
        raise MetricError(f"stability_score needs at least {min_frames} frames, got {len(video)}")
    score, ratios = path_stability(camera_path(video, workers, flows), bins, reduce)
    return (score, ratios) if return_channels else score


def _frame_affine(original: np.ndarray, stabilized: np.ndarray, min_pixels: int, c_min: float) -> Optional[AffineTransform]:
    field_ = dense_flow(original, stabilized)
    weights = np.where(field_.confidence >= c_min, field_.confidence, 0.0)
    if np.count_nonzero(weights) < min_pixels:
        return None
    try:
        return fit_affine(field_.u, field_.v, weights)
    except AlignmentError:
        return None


def frame_affines(original: FrameSequence, stabilized: FrameSequence, workers: Optional[int] = None) -> List[Optional[AffineTransform]]:
    if len(original) != len(stabilized):
        raise MetricError(f"original has {len(original)} frames, stabilized has {len(stabilized)}")
    if original.data.shape[1:] != stabilized.data.shape[1:]:
        raise MetricError(f"frame sizes differ: {original.data.shape[1:3]} vs {stabilized.data.shape[1:3]}")
    min_pixels = int(get_setting('metrics', 'min_fit_pixels', 32))
    c_min = float(get_setting('flow', 'c_min', 0.2))
    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        return list(pool.map(lambda t: _frame_affine(original.data[t], stabilized.data[t], min_pixels, c_min),
                             range(len(original))))


def _require_fitted(fits: List[Optional[AffineTransform]], op: str) -> List[AffineTransform]:
    fitted = [f for f in fits if f is not None]
    required = float(get_setting('metrics', 'min_fitted_fraction', 0.8))
    if not fits or len(fitted) / len(fits) < required:
        raise MetricError(f"{op}: only {len(fitted)} of {len(fits)} frames fitted, need {required:.0%}")
    return fitted


def crop_ratio(affine: AffineTransform) -> float:
    scale = affine.scale
    return 1.0 if scale <= 1.0 else 1.0 / scale


def cropping_score(original: FrameSequence, stabilized: FrameSequence, workers: Optional[int] = None,
                   fits: Optional[List[Optional[AffineTransform]]] = None) -> float:
    fits = frame_affines(original, stabilized, workers) if fits is None else fits
    return float(np.mean([crop_ratio(f) for f in _require_fitted(fits, 'cropping_score')]))


def distortion_score(original: FrameSequence, stabilized: FrameSequence, reduce: Optional[str] = None,
                     workers: Optional[int] = None, fits: Optional[List[Optional[AffineTransform]]] = None) -> float:
    reduce = get_setting('metrics', 'distortion_reduce', 'mean') if reduce is None else reduce
    if reduce not in REDUCTIONS:
        raise MetricError(f"Unknown reduction '{reduce}'; expected one of {REDUCTIONS}")
    fits = frame_affines(original, stabilized, workers) if fits is None else fits
    values = [f.anisotropy for f in _require_fitted(fits, 'distortion_score')]
    return float(np.mean(values) if reduce == 'mean' else np.min(values))


@dataclass
class EvaluationReport:
    stability: float
    cropping: float
    distortion: float
    frames: int
    stability_channels: Dict[str, float] = field(default_factory=dict)
    per_frame: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def evaluate(
    original: FrameSequence,
    stabilized: FrameSequence,
    stability_reduce: Optional[str] = None,
    distortion_reduce: Optional[str] = None,
    workers: Optional[int] = None,
    flows: Optional[Sequence[FlowField]] = None,
) -> EvaluationReport:
    """
    Stability of the stabilized video plus cropping/distortion against the original

    flows: precomputed global flows between consecutive stabilized frames
    """
    fits = frame_affines(original, stabilized, workers)
    stability, channels = stability_score(stabilized, stability_reduce, workers, return_channels=True, flows=flows)
    per_frame = []
    for t, f in enumerate(fits):
        entry = {'frame': t, 'fitted': f is not None}
        if f is not None:
            entry.update({'cropping': crop_ratio(f), 'distortion': f.anisotropy, 'scale': f.scale})
        per_frame.append(entry)
    report = EvaluationReport(
        stability=stability,
        cropping=cropping_score(original, stabilized, fits=fits),
        distortion=distortion_score(original, stabilized, distortion_reduce, fits=fits),
        frames=len(stabilized),
        stability_channels=channels,
        per_frame=per_frame,
    )
    logger.info("Evaluation: stability=%.4f cropping=%.4f distortion=%.4f",
                report.stability, report.cropping, report.distortion)
    return report
