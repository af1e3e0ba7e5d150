"""
Settings Manager for MetaStab
=============================

Centralized settings management. Every tunable constant lives in
DEFAULT_SETTINGS, grouped by category; modules read the active values through
get_setting() or the typed views at the bottom of this file.
"""

import copy
import json
import logging
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from metastab.errors import ConfigError

logger = logging.getLogger(__name__)


# Default settings
DEFAULT_SETTINGS = {
    'runtime': {
        'seed': 0,
        'workers': None,  # None -> os.cpu_count()
        'precision': 'float32',  # float32 or float64
        'progress': True,
        'log_level': 'INFO',
    },
    'flow': {
        'iterations': 5,  # Lucas-Kanade updates per pyramid level
        'window_sigma': 2.0,  # Gaussian integration window
        'presmooth_sigma': 1.0,
        'confidence_kappa': 1e-2,  # eigenvalue -> confidence squashing (normalized luma units)
        'residual_sigma': 0.5,  # photometric residual attenuation
        'tau_out': 1.5,  # px, deviation from rigid prediction
        'c_min': 0.2,
        'huber_delta': 1.0,  # px
        'irls_iterations': 5,
        'min_inlier_fraction': 0.10,
    },
    'regressor': {
        'input_size': 32,
        'widths': (16, 32, 32),
        'theta_range_deg': 5.0,
        'translation_range': 20.0,  # px
        'steps': 1500,
        'batch_size': 32,
        'learning_rate': 3e-3,
        'samples': 512,
        'frame_size': 64,
        'flow_source': 'analytic',  # analytic or estimated
        'flow_noise': 0.05,  # px, analytic source only
    },
    'synthesis': {
        'k': 2,  # half-window, 5-frame window
        'base_width': 32,
        'recurrent': False,
        'leaky_slope': 0.1,
        'batch_windows': 8,
    },
    'losses': {
        'lambda_s': 10.0,
        'lambda_p': 1.0,
        'cx_bandwidth': 0.5,  # h
        'cx_epsilon': 1e-5,
        'cx_max_positions': 4096,
        'feature_widths': (16, 32, 64, 128),
        'feature_seed': 1234,
        'surrogate_steps': 2,  # Gauss-Newton steps per pyramid level
        'surrogate_regularization': 1e-4,
        'surrogate_window_sigma': 1.5,
    },
    'meta': {
        'alpha': 1e-4,  # inner SGD learning rate
        'beta': 1e-4,  # outer Adam learning rate
        'adam_beta1': 0.9,
        'adam_beta2': 0.999,
        'adaptation_steps': 1,  # M
        'meta_batch': 2,
        'outer_steps': 300,
        'frames_per_task': 5,  # T
        'patch': 64,
        'first_order': True,
        'disjoint_outer_windows': False,
        'checkpoint_every': 50,
        'keep_checkpoints': 5,
        'max_consecutive_skips': 3,
        'inference_patch': 320,
        'adapt_samples': 100,
    },
    'synthetic': {
        'frames': 60,
        'height': 64,
        'width': 64,
        'sprites': 2,
        'canvas_margin': 0.25,
        'rotation_std': 0.004,  # rad
        'translation_std': 1.5,  # px
        'jitter_correlation': 0.5,
        'smooth_amplitude': (4.0, 3.0, 0.01),  # tx px, ty px, theta rad
        'smooth_period': (64.0, 96.0, 128.0),  # frames
        'max_out_of_frame': 0.40,
    },
    'metrics': {
        'min_frames': 32,
        'stability_bins': (2, 6),
        'stability_reduce': 'mean',  # mean or min
        'distortion_reduce': 'mean',
        'min_fitted_fraction': 0.80,
        'min_fit_pixels': 32,
    },
}

# Loss weight presets per motion category (lambda_s, lambda_p)
CATEGORY_WEIGHTS = {
    'crowd': (10.0, 1.0),
    'running': (10.0, 1.0),
    'quick_rotation': (10.0, 1.0),
    'parallax': (1.0, 1.0),
    'regular': (1.0, 1.0),
    'zoom': (1.0, 1.0),
}

# Window-synthesis presets: DMBVS-style 5-frame window, DIFRINT-style recurrent 3-frame window
ARCHITECTURE_PRESETS = {
    'dmbvs': {'k': 2, 'recurrent': False},
    'difrint': {'k': 1, 'recurrent': True},
}

_settings: Optional[Dict[str, Dict[str, Any]]] = None


def init_settings() -> Dict[str, Dict[str, Any]]:
    """Initialize settings if not present"""
    global _settings
    if _settings is None:
        _settings = copy.deepcopy(DEFAULT_SETTINGS)
    return _settings


def reset_settings():
    """Restore every setting to its default"""
    global _settings
    _settings = copy.deepcopy(DEFAULT_SETTINGS)


def get_setting(category: str, key: str, default=None):
    """Get a specific setting value"""
    settings = init_settings()
    return settings.get(category, {}).get(key, default)


def set_setting(category: str, key: str, value: Any):
    """Set a specific setting value"""
    settings = init_settings()
    if category not in DEFAULT_SETTINGS:
        raise ConfigError(f"Unknown settings category '{category}'")
    if key not in DEFAULT_SETTINGS[category]:
        raise ConfigError(f"Unknown setting '{category}.{key}'")
    settings[category][key] = value


def snapshot_settings() -> Dict[str, Dict[str, Any]]:
    """Deep copy of the active settings, suitable for a run manifest"""
    return copy.deepcopy(init_settings())


def apply_overrides(overrides: Mapping[str, Mapping[str, Any]]):
    """
    Merge nested {category: {key: value}} overrides into the active settings

    None values are ignored so unset CLI flags never clobber file values.
    """
    for category, values in overrides.items():
        if not isinstance(values, Mapping):
            raise ConfigError(f"Settings category '{category}' must be a table")
        for key, value in values.items():
            if value is None:
                continue
            set_setting(category, key, value)


def load_settings_file(path: str) -> Dict[str, Dict[str, Any]]:
    """
    Load a TOML or JSON settings file into the active settings

    Args:
        path: .toml or .json file with {category: {key: value}} tables

    Returns:
        The active settings after merging
    """
    file_path = Path(path)
    raw = file_path.read_bytes()
    if file_path.suffix.lower() == '.toml':
        try:
            data = tomllib.loads(raw.decode('utf-8'))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}") from e
    else:
        try:
            data = json.loads(raw.decode('utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}") from e

    apply_overrides(data)
    logger.info("Loaded settings from %s", path)
    return init_settings()


def resolve_workers(workers: Optional[int] = None) -> int:
    """Worker count from argument, then settings, then available parallelism"""
    if workers is None:
        workers = get_setting('runtime', 'workers')
    if workers is None:
        workers = os.cpu_count() or 1
    return max(1, int(workers))


# ============================================================================
# TYPED VIEWS
# ============================================================================

def flow_params() -> Dict[str, Any]:
    """Get keyword configuration for optical flow estimation"""
    return dict(init_settings()['flow'])


def loss_weights_from_settings(category: Optional[str] = None):
    """LossWeights from settings, optionally replaced by a motion-category preset"""
    from metastab.losses import LossWeights

    if category is not None:
        if category not in CATEGORY_WEIGHTS:
            raise ConfigError(
                f"Unknown motion category '{category}'; expected one of {sorted(CATEGORY_WEIGHTS)}"
            )
        lambda_s, lambda_p = CATEGORY_WEIGHTS[category]
        return LossWeights(lambda_s=lambda_s, lambda_p=lambda_p)
    return LossWeights(
        lambda_s=float(get_setting('losses', 'lambda_s')),
        lambda_p=float(get_setting('losses', 'lambda_p')),
    )


def meta_config_from_settings():
    """MetaConfig assembled from the meta, synthesis and runtime categories"""
    from metastab.meta import MetaConfig

    meta = init_settings()['meta']
    return MetaConfig(
        alpha=float(meta['alpha']),
        beta=float(meta['beta']),
        M=int(meta['adaptation_steps']),
        meta_batch=int(meta['meta_batch']),
        outer_steps=int(meta['outer_steps']),
        patch=int(meta['patch']),
        seed=int(get_setting('runtime', 'seed')),
        first_order=bool(meta['first_order']),
        T=int(meta['frames_per_task']),
        k=int(get_setting('synthesis', 'k')),
        base_width=int(get_setting('synthesis', 'base_width')),
        disjoint_outer_windows=bool(meta['disjoint_outer_windows']),
        checkpoint_every=int(meta['checkpoint_every']),
        keep_checkpoints=int(meta['keep_checkpoints']),
        max_consecutive_skips=int(meta['max_consecutive_skips']),
        adam_betas=(float(meta['adam_beta1']), float(meta['adam_beta2'])),
    )


def shake_profile_from_settings(seed: Optional[int] = None):
    """ShakeProfile from the synthetic category"""
    from metastab.synthetic import ShakeProfile

    synthetic = init_settings()['synthetic']
    return ShakeProfile(
        rotation_std=float(synthetic['rotation_std']),
        translation_std=float(synthetic['translation_std']),
        smooth_amplitude=tuple(float(a) for a in synthetic['smooth_amplitude']),
        smooth_period=tuple(float(p) for p in synthetic['smooth_period']),
        jitter_correlation=float(synthetic['jitter_correlation']),
        seed=int(get_setting('runtime', 'seed') if seed is None else seed),
    )
