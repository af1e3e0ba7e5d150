"""
Experiments
===========

Drivers for the trend experiments: stability against the number of
adaptation passes, loss-weight sweeps, and meta-trained vs conventionally
trained models after a single adaptation step.

Only unstable videos are consumed; stable ground truth is never read here.
"""

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from metastab import autodiff as ad
from metastab.autodiff import ParamVector
from metastab.frames import FrameSequence
from metastab.losses import FeatureExtractor, LossWeights, inner_loss
from metastab.meta import Task, compute_alignment, inner_adapt, meta_inference
from metastab.metrics import distortion_score, stability_score
from metastab.rigid import AffineRegressor
from metastab.synthesis import SynthesisNet

logger = logging.getLogger(__name__)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation; 0.0 when either side is constant"""
    if len(set(x)) < 2 or len(set(y)) < 2:
        return 0.0
    rho = stats.spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def _adapted_video(net, params, video, M, adapt_samples, weights, extractor, regressor, alpha, seed, workers):
    return meta_inference(
        net, params, video, M, adapt_samples, weights,
        extractor=extractor, regressor=regressor, alpha=alpha, seed=seed, workers=workers,
    ).video


def adaptation_trend(
    net: SynthesisNet,
    params: ParamVector,
    videos: Sequence[FrameSequence],
    M_values: Sequence[int] = (0, 1, 5),
    adapt_samples: Union[int, str] = 100,
    weights: Optional[LossWeights] = None,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    alpha: Optional[float] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Dict:
    """Mean stability_score of the adapted output for each M"""
    weights = weights or LossWeights()
    rows = []
    for M in M_values:
        scores = []
        for i, video in enumerate(videos):
            adapted = _adapted_video(net, params, video, M, adapt_samples, weights, extractor, regressor, alpha, seed + i, workers)
            scores.append(stability_score(adapted, workers=workers))
        rows.append({'M': int(M), 'stability': float(np.mean(scores)), 'per_video': scores})
        logger.info("Adapt(%d)_%s: mean stability %.4f", M, adapt_samples, rows[-1]['stability'])
    values = [r['stability'] for r in rows]
    return {
        'rows': rows,
        'gain': float(values[-1] - values[0]) if values else 0.0,
        'non_decreasing': bool(all(b >= a for a, b in zip(values, values[1:]))),
    }


def loss_weight_sweep(
    net: SynthesisNet,
    params: ParamVector,
    videos: Sequence[FrameSequence],
    lambda_s_values: Sequence[float] = (1.0, 5.0, 10.0),
    lambda_p_values: Sequence[float] = (1.0, 5.0, 10.0),
    M: int = 1,
    adapt_samples: Union[int, str] = 100,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
    alpha: Optional[float] = None,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Dict:
    """
    λ_s sweep (λ_p = 1) scored by stability and λ_p sweep (λ_s = 1) scored by
    distortion, each averaged over the videos, with Spearman correlations
    """
    def sweep(values, make_weights, score):
        means = []
        for value in values:
            weights = make_weights(value)
            per_video = []
            for i, video in enumerate(videos):
                adapted = _adapted_video(net, params, video, M, adapt_samples, weights, extractor, regressor, alpha, seed + i, workers)
                per_video.append(score(video, adapted))
            means.append(float(np.mean(per_video)))
            logger.info("%s: mean score %.4f", weights, means[-1])
        return {'values': [float(v) for v in values], 'scores': means, 'spearman': spearman(list(values), means)}

    stability = sweep(lambda_s_values, lambda v: LossWeights(v, 1.0),
                      lambda original, adapted: stability_score(adapted, workers=workers))
    distortion = sweep(lambda_p_values, lambda v: LossWeights(1.0, v),
                       lambda original, adapted: distortion_score(original, adapted, workers=workers))
    return {'lambda_s': stability, 'lambda_p': distortion}


def _stability_term(net, params, task, aligned, weights, extractor) -> float:
    with ad.no_grad():
        return inner_loss(net, params, task.windows(), aligned.frames, weights, extractor).stability


def meta_vs_finetune(
    net: SynthesisNet,
    meta_params: ParamVector,
    baseline_params: ParamVector,
    tasks: Sequence[Task],
    alpha: float,
    weights: Optional[LossWeights] = None,
    extractor: Optional[FeatureExtractor] = None,
    regressor: Optional[AffineRegressor] = None,
) -> Dict:
    """
    Per-task reduction of the inner stability term after one adaptation
    step, for the meta-trained and the conventionally trained model
    """
    weights = weights or LossWeights()
    meta_gains: List[float] = []
    finetune_gains: List[float] = []
    for task in tasks:
        task = task.without_stable()
        aligned = compute_alignment(task, regressor)
        for params, gains in ((meta_params, meta_gains), (baseline_params, finetune_gains)):
            before = _stability_term(net, params, task, aligned, weights, extractor)
            adapted = inner_adapt(net, params, task, 1, alpha, weights, extractor, regressor, aligned=aligned)
            after = _stability_term(net, adapted, task, aligned, weights, extractor)
            gains.append(before - after)
    wins = [m > f for m, f in zip(meta_gains, finetune_gains)]
    return {
        'meta_gain': meta_gains,
        'finetune_gain': finetune_gains,
        'meta_wins_fraction': float(np.mean(wins)) if wins else 0.0,
    }
