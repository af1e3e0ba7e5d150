"""
Meta-Learner
============

Meta-training (MAML over short task sequences) and meta-inference (test-time
adaptation followed by sliding-window stabilization).

A task is T+1+2k consecutive frames cropped to a patch: enough for T+1
windows of 2k+1 frames. The inner loop adapts a copy of θ with plain SGD on
the inner loss; alignment targets are computed once per task and reused for
all M steps. The outer loop evaluates the outer loss at the adapted θ' and
applies the gradient to θ with Adam (first-order), or uses the full
meta-gradient through the inner steps for tiny networks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from metastab import autodiff as ad
from metastab.autodiff import Adam, ParamVector, Tensor
from metastab.errors import ConfigError, FrameSequenceError, NonFiniteLossError, TrainingAbortedError
from metastab.frames import FrameSequence, pad_boundary_frames
from metastab.losses import FeatureExtractor, LossBreakdown, LossWeights, default_extractor, inner_loss, outer_loss
from metastab.rigid import AffineRegressor, AlignedSequence, align_sequence
from metastab.settings_manager import get_setting, resolve_workers
from metastab.synthesis import SynthesisNet, build_windows, stabilize_video

logger = logging.getLogger(__name__)


@dataclass
class Task:
    """
    One sampled short sequence: T+1+2k unstable frames (and optional stable
    counterparts) cropped to a square patch
    """

    task_id: str
    unstable: np.ndarray
    k: int
    stable: Optional[np.ndarray] = None
    video_id: str = ''
    offset: int = 0
    crop: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.unstable.shape[0] < 2 * self.k + 2:
            raise FrameSequenceError(
                f"task {self.task_id}: {self.unstable.shape[0]} frames, need at least {2 * self.k + 2} for k={self.k}"
            )
        if self.stable is not None and self.stable.shape != self.unstable.shape:
            raise FrameSequenceError(f"task {self.task_id}: stable {self.stable.shape} vs unstable {self.unstable.shape}")

    @property
    def T(self) -> int:
        return self.unstable.shape[0] - 2 * self.k - 1

    def windows(self) -> np.ndarray:
        """(T+1)×(2k+1)·3×H×W"""
        return build_windows(self.unstable, self.k)

    def centers(self) -> np.ndarray:
        return self.unstable[self.k:self.unstable.shape[0] - self.k]

    def stable_centers(self) -> np.ndarray:
        if self.stable is None:
            raise FrameSequenceError(f"task {self.task_id} has no stable frames")
        return self.stable[self.k:self.stable.shape[0] - self.k]

    def without_stable(self) -> 'Task':
        return Task(self.task_id, self.unstable, self.k, None, self.video_id, self.offset, self.crop)


@dataclass
class MetaConfig:
    alpha: float = 1e-4
    beta: float = 1e-4
    M: int = 1
    meta_batch: int = 2
    outer_steps: int = 300
    patch: int = 64
    seed: int = 0
    first_order: bool = True
    T: int = 5
    k: int = 2
    base_width: int = 32
    disjoint_outer_windows: bool = False
    checkpoint_every: int = 50
    keep_checkpoints: int = 5
    max_consecutive_skips: int = 3
    adam_betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(f"MetaConfig: alpha and beta must be > 0 (alpha={self.alpha}, beta={self.beta})")
        if self.M < 1:
            raise ConfigError(f"MetaConfig: M must be ≥ 1, got {self.M}")
        if self.T < 1 or self.k < 0 or self.meta_batch < 1 or self.patch < 32:
            raise ConfigError(
                f"MetaConfig: invalid sizes T={self.T}, k={self.k}, meta_batch={self.meta_batch}, patch={self.patch}"
            )
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['adam_betas'] = list(self.adam_betas)
        return data

    @property
    def task_length(self) -> int:
        return self.T + 1 + 2 * self.k


class TaskSampler:
    """
    Uniform task sampling over videos, start offsets and patch crops

    Sources are (unstable, stable-or-None) or (video_id, unstable, stable-or-None)
    frame stacks; SyntheticPair objects are accepted directly.
    """

    def __init__(self, sources: Sequence, T: int, k: int, patch: int, seed: int = 0):
        self.sources: List[Tuple[str, np.ndarray, Optional[np.ndarray]]] = []
        for i, src in enumerate(sources):
            if hasattr(src, 'unstable') and hasattr(src, 'stable'):
                self.sources.append((getattr(src, 'video_id', f'video_{i}'), src.unstable.data, src.stable.data))
            else:
                video_id, unstable, stable = src if len(src) == 3 else (f'video_{i}', *src)
                unstable = unstable.data if isinstance(unstable, FrameSequence) else unstable
                stable = stable.data if isinstance(stable, FrameSequence) else stable
                self.sources.append((video_id, unstable, stable))
        if not self.sources:
            raise FrameSequenceError("TaskSampler: no videos")
        self.T, self.k = T, k
        self.length = T + 1 + 2 * k
        for video_id, frames, _ in self.sources:
            if frames.shape[0] < self.length:
                raise FrameSequenceError(f"{video_id}: {frames.shape[0]} frames, tasks need {self.length}")
        self.patch = patch
        self.rng = np.random.default_rng(seed)
        self.counter = 0

    def make_task(self, video: int, offset: int, crop: Tuple[int, int], size: Optional[int] = None) -> Task:
        video_id, unstable, stable = self.sources[video]
        h, w = unstable.shape[1:3]
        size = min(self.patch, h, w) if size is None else size
        y, x = crop
        window = np.s_[offset:offset + self.length, y:y + size, x:x + size]
        task = Task(
            task_id=f'{video_id}@{offset}+{y},{x}#{self.counter}',
            unstable=np.ascontiguousarray(unstable[window]),
            k=self.k,
            stable=None if stable is None else np.ascontiguousarray(stable[window]),
            video_id=video_id,
            offset=offset,
            crop=crop,
        )
        self.counter += 1
        return task

    def sample(self, count: int) -> List[Task]:
        tasks = []
        for _ in range(count):
            video = int(self.rng.integers(len(self.sources)))
            frames = self.sources[video][1]
            n, h, w = frames.shape[:3]
            size = min(self.patch, h, w)
            offset = int(self.rng.integers(0, n - self.length + 1))
            crop = (int(self.rng.integers(0, h - size + 1)), int(self.rng.integers(0, w - size + 1)))
            tasks.append(self.make_task(video, offset, crop, size))
        return tasks

    def sample_outer(self, task: Task) -> Task:
        """Windows from the same video and crop that do not overlap the task"""
        video = next(i for i, (vid, _, _) in enumerate(self.sources) if vid == task.video_id)
        n = self.sources[video][1].shape[0]
        candidates = [o for o in range(0, n - self.length + 1)
                      if o + self.length <= task.offset or o >= task.offset + self.length]
        if not candidates:
            logger.warning("No disjoint outer windows in %s; reusing the inner windows", task.video_id)
            return task
        offset = int(candidates[int(self.rng.integers(len(candidates)))])
        return self.make_task(video, offset, task.crop, task.unstable.shape[1])

    def tile(self, size: Optional[int] = None) -> List[Task]:
        """Every temporal block of T+1 centres and every spatial patch, without stable frames"""
        tasks = []
        for video, (_, frames, _) in enumerate(self.sources):
            n, h, w = frames.shape[:3]
            s = min(self.patch, h, w) if size is None else size
            offsets = _tile_starts(n, self.length, self.T + 1)
            ys, xs = _tile_starts(h, s, s), _tile_starts(w, s, s)
            for offset in offsets:
                for y in ys:
                    for x in xs:
                        tasks.append(self.make_task(video, offset, (y, x), s).without_stable())
        return tasks


def _tile_starts(total: int, size: int, stride: int) -> List[int]:
    starts = list(range(0, total - size + 1, stride))
    if starts[-1] != total - size:
        starts.append(total - size)
    return starts


# ============================================================================
# INNER LOOP
# ============================================================================

def compute_alignment(task: Task, regressor: Optional[AffineRegressor] = None) -> AlignedSequence:
    return align_sequence(task.centers(), regressor)


def _parameter_norms(params: ParamVector) -> Dict[str, float]:
    return {name: float(np.linalg.norm(t.data)) for name, t in params.items()}


def inner_adapt(
    net: SynthesisNet,
    params: ParamVector,
    task: Task,
    M: int,
    alpha: float,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    aligned: Optional[AlignedSequence] = None,
    history: Optional[List[Dict]] = None,
) -> ParamVector:
    """
    θ' after M SGD steps on the inner loss; θ itself is never modified

    Raises:
        NonFiniteLossError: the inner loss became NaN/Inf (diagnostics attached)
    """
    adapted = params.clone()
    if M <= 0:
        return adapted
    if aligned is None:
        aligned = compute_alignment(task, regressor)
    windows = task.windows()
    for step in range(M):
        breakdown = inner_loss(net, adapted, windows, aligned.frames, weights, extractor)
        if not breakdown.is_finite:
            raise NonFiniteLossError(
                f"inner loss is not finite on task {task.task_id} at step {step}",
                diagnostics={
                    'task': task.task_id,
                    'step': step,
                    'terms': breakdown.as_record(),
                    'parameter_norms': _parameter_norms(adapted),
                },
            )
        ad.backward(breakdown.total)
        ad.sgd_step(adapted, alpha)
        if history is not None:
            history.append({'task': task.task_id, 'step': step, **breakdown.as_record()})
    return adapted


# ============================================================================
# META-GRADIENTS
# ============================================================================

def outer_gradient(
    net: SynthesisNet,
    params: ParamVector,
    task: Task,
    extractor: Optional[FeatureExtractor] = None,
) -> Tuple[Dict[str, np.ndarray], LossBreakdown]:
    """∇ of the outer loss at params on the task's windows and stable frames"""
    evaluated = params.clone()
    synth = net.forward(evaluated, Tensor(task.windows()))
    breakdown = outer_loss(synth, task.stable_centers(), extractor)
    ad.backward(breakdown.total)
    return evaluated.gradients(), breakdown


def first_order_meta_gradient(
    net: SynthesisNet,
    params: ParamVector,
    task: Task,
    M: int,
    alpha: float,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    outer_task: Optional[Task] = None,
    history: Optional[List[Dict]] = None,
):
    """∇_{θ'} L_out evaluated at θ' = inner_adapt(θ), to be applied to θ"""
    adapted = inner_adapt(net, params, task, M, alpha, weights, extractor, regressor, history=history)
    return outer_gradient(net, adapted, outer_task or task, extractor)


def _flat_inner_gradient(net, template: ParamVector, flat: np.ndarray, windows, aligned, weights, extractor) -> np.ndarray:
    probe = template.clone()
    probe.assign_flat(flat)
    breakdown = inner_loss(net, probe, windows, aligned, weights, extractor)
    ad.backward(breakdown.total)
    return probe.grads_flat().astype(np.float64)


def second_order_meta_gradient(
    net: SynthesisNet,
    params: ParamVector,
    task: Task,
    M: int,
    alpha: float,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    outer_task: Optional[Task] = None,
    fd_step: float = 1e-3,
) -> Tuple[Dict[str, np.ndarray], LossBreakdown]:
    """
    Full meta-gradient dL_out(θ_M)/dθ through M SGD steps

    Backpropagates g ← g − α·H(θ_m)·g from the last step to the first, with
    Hessian-vector products taken by central differences of inner gradients.
    Intended for tiny networks.
    """
    extractor = default_extractor() if extractor is None else extractor
    aligned = compute_alignment(task, regressor)
    windows = task.windows()

    trajectory = [params.flatten().astype(np.float64)]
    for _ in range(M):
        grad = _flat_inner_gradient(net, params, trajectory[-1], windows, aligned.frames, weights, extractor)
        trajectory.append(trajectory[-1] - alpha * grad)

    final = params.clone()
    final.assign_flat(trajectory[-1])
    outer_grads, breakdown = outer_gradient(net, final, outer_task or task, extractor)
    g = np.concatenate([outer_grads[name].ravel() for name in params.names()]).astype(np.float64)

    for theta in reversed(trajectory[:-1]):
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        step = fd_step / norm
        plus = _flat_inner_gradient(net, params, theta + step * g, windows, aligned.frames, weights, extractor)
        minus = _flat_inner_gradient(net, params, theta - step * g, windows, aligned.frames, weights, extractor)
        g = g - alpha * (plus - minus) / (2 * step)

    grads, offset = {}, 0
    for name, tensor in params.items():
        grads[name] = g[offset:offset + tensor.size].reshape(tensor.shape)
        offset += tensor.size
    return grads, breakdown


# ============================================================================
# META-TRAINING
# ============================================================================

@dataclass
class MetaTrainingResult:
    params: ParamVector
    outer_losses: List[float] = field(default_factory=list)
    skipped_steps: List[int] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    def smoothed(self, window: int = 5) -> List[float]:
        values = np.asarray(self.outer_losses, dtype=np.float64)
        if values.size == 0:
            return []
        kernel = np.ones(min(window, values.size)) / min(window, values.size)
        return list(np.convolve(values, kernel, mode='valid'))


def _all_finite(grads: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def meta_train(
    net: SynthesisNet,
    params: ParamVector,
    sampler: TaskSampler,
    config: MetaConfig,
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
    progress: bool = True,
    start_step: int = 0,
) -> MetaTrainingResult:
    """
    Meta-train θ in place and return it

    Each outer step samples meta_batch tasks, adapts a copy of θ per task
    (tasks run on parallel threads), evaluates the outer loss at θ', sums the
    per-task gradients in task order and applies them with Adam.

    Raises:
        TrainingAbortedError: max_consecutive_skips non-finite batches in a row

    start_step: steps already taken (resuming from a checkpoint); Adam moments
    restart from zero
    """
    from metastab.exporters import JsonLinesLog
    from metastab.session_manager import auto_save_checkpoint

    extractor = default_extractor() if extractor is None else extractor
    optimizer = Adam(params, lr=config.beta, betas=config.adam_betas)
    result = MetaTrainingResult(params)
    consecutive_skips = 0
    log = JsonLinesLog(log_path) if log_path is not None else None

    def run_task(pair):
        task, outer_task = pair
        history: List[Dict] = []
        try:
            if config.first_order:
                grads, breakdown = first_order_meta_gradient(
                    net, params, task, config.M, config.alpha, weights, extractor, regressor, outer_task, history)
            else:
                grads, breakdown = second_order_meta_gradient(
                    net, params, task, config.M, config.alpha, weights, extractor, regressor, outer_task)
        except NonFiniteLossError as e:
            return None, None, history, e
        return grads, breakdown, history, None

    # replay the draws of the steps already taken
    for _ in range(start_step):
        for task in sampler.sample(config.meta_batch):
            if config.disjoint_outer_windows:
                sampler.sample_outer(task)

    pool = ThreadPoolExecutor(max_workers=min(resolve_workers(workers), config.meta_batch))
    try:
        for step in tqdm(range(start_step + 1, config.outer_steps + 1), desc='meta-train', disable=not progress):
            tasks = sampler.sample(config.meta_batch)
            outer_tasks = [sampler.sample_outer(t) if config.disjoint_outer_windows else t for t in tasks]
            outcomes = list(pool.map(run_task, zip(tasks, outer_tasks)))

            failure = next((o[3] for o in outcomes if o[3] is not None), None)
            if failure is None and not all(o[1].is_finite and _all_finite(o[0]) for o in outcomes):
                failure = NonFiniteLossError(f"outer loss is not finite at step {step}")
            if failure is not None:
                consecutive_skips += 1
                result.skipped_steps.append(step)
                logger.warning("Skipping outer step %d: %s", step, failure)
                if log:
                    log.write({'event': 'skip', 'step': step, 'reason': str(failure),
                               'diagnostics': getattr(failure, 'diagnostics', {})})
                if consecutive_skips >= config.max_consecutive_skips:
                    raise TrainingAbortedError(
                        f"meta_train aborted after {consecutive_skips} consecutive non-finite batches (step {step})"
                    )
                continue
            consecutive_skips = 0

            summed = {name: np.zeros_like(t.data) for name, t in params.items()}
            for grads, _, _, _ in outcomes:
                for name in summed:
                    summed[name] += grads[name]
            optimizer.step(summed)

            outer_value = float(sum(o[1].value for o in outcomes))
            result.outer_losses.append(outer_value)
            if log:
                inner_records = [h[-1] for _, _, h, _ in outcomes if h]
                log.write({
                    'event': 'step',
                    'step': step,
                    'outer_loss': outer_value,
                    'outer_stability': float(sum(o[1].stability for o in outcomes)),
                    'outer_contextual': float(sum(o[1].contextual for o in outcomes)),
                    'inner': inner_records,
                    'lambda_s': weights.lambda_s,
                    'lambda_p': weights.lambda_p,
                })

            if checkpoint_dir is not None and config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
                path = auto_save_checkpoint(params.to_arrays(), checkpoint_dir, step, keep_last=config.keep_checkpoints)
                result.checkpoints.append(path)
                if log:
                    log.write({'event': 'checkpoint', 'step': step, 'path': str(path)})
    finally:
        pool.shutdown(wait=True)
        if log:
            log.close()

    if result.outer_losses:
        logger.info("Meta-training done: outer loss %.4g -> %.4g (%d skipped)",
                    result.outer_losses[0], result.outer_losses[-1], len(result.skipped_steps))
    return result


def pretrain_supervised(
    net: SynthesisNet,
    params: ParamVector,
    sampler: TaskSampler,
    steps: int,
    learning_rate: float,
    batch: int = 1,
    extractor: Optional[FeatureExtractor] = None,
    progress: bool = False,
) -> ParamVector:
    """Conventional training of θ on the outer loss, without adaptation"""
    trained = params.clone()
    optimizer = Adam(trained, lr=learning_rate)
    for _ in tqdm(range(steps), desc='pretrain', disable=not progress):
        summed = {name: np.zeros_like(t.data) for name, t in trained.items()}
        for task in sampler.sample(batch):
            grads, _ = outer_gradient(net, trained, task, extractor)
            for name in summed:
                summed[name] += grads[name]
        optimizer.step(summed)
    return trained


# ============================================================================
# META-INFERENCE
# ============================================================================

@dataclass
class InferenceResult:
    video: FrameSequence
    params: ParamVector
    tasks: int
    history: List[Dict] = field(default_factory=list)


def meta_inference(
    net: SynthesisNet,
    params: ParamVector,
    video: FrameSequence,
    M: int,
    adapt_samples: Union[int, str],
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    recurrent: bool = False,
    alpha: Optional[float] = None,
    T: Optional[int] = None,
    patch: Optional[int] = None,
    seed: int = 0,
    workers: Optional[int] = None,
    progress: bool = False,
) -> InferenceResult:
    """
    Adapt θ* to one video with the inner loss only, then stabilize it

    Adapt(M)_S: S tasks are sampled at patch×patch (full frame when smaller),
    or every task when adapt_samples == "all"; M passes are made over them,
    one SGD step per task. Stable frames are never consulted.
    """
    alpha = float(get_setting('meta', 'alpha')) if alpha is None else alpha
    T = int(get_setting('meta', 'frames_per_task')) if T is None else T
    patch = int(get_setting('meta', 'inference_patch')) if patch is None else patch
    k = net.k
    # padded by k on each side, the video must still hold one T+1+2k task
    need = max(T + 2 * k, T + 1)
    if len(video) < need:
        raise FrameSequenceError(f"meta_inference: video has {len(video)} frames, need at least {need}")

    adapted = params.clone()
    history: List[Dict] = []
    task_count = 0
    if M > 0:
        padded = pad_boundary_frames(video, k)
        sampler = TaskSampler([(padded.data, None)], T, k, patch, seed)
        if adapt_samples == 'all':
            tasks = sampler.tile()
        else:
            tasks = sampler.sample(int(adapt_samples))
        task_count = len(tasks)
        alignments = [compute_alignment(task, regressor) for task in tasks]
        total = M * len(tasks)
        with tqdm(total=total, desc='adapt', disable=not progress) as bar:
            for _ in range(M):
                for task, aligned in zip(tasks, alignments):
                    adapted = inner_adapt(net, adapted, task, 1, alpha, weights, extractor, regressor,
                                          aligned=aligned, history=history)
                    bar.update(1)
        logger.info("Adapted on %d tasks for %d pass(es)", task_count, M)

    stabilized = stabilize_video(video, net, adapted, recurrent=recurrent, workers=workers)
    return InferenceResult(stabilized, adapted, task_count, history)
