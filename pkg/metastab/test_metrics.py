import math

import numpy as np
import pytest

from metastab.errors import MetricError
from metastab.frames import FrameSequence
from metastab.metrics import (
    CameraPath,
    crop_ratio,
    cropping_score,
    distortion_score,
    evaluate,
    global_flows,
    low_frequency_ratio,
    path_stability,
    stability_score,
)
from metastab.synthetic import ShakeProfile, render_procedural_scene, synthesize_pair
from metastab.transforms import AffineTransform, RigidTransform, image_center, warp_affine_array

N = 36


def static_video(n=N, size=48):
    frame = render_procedural_scene(1, size, size, seed=9, sprites=0, margin=0.0).canvas[0]
    return FrameSequence(np.repeat(frame[None], n, axis=0))


def test_low_frequency_ratio_of_flat_signal_is_one():
    assert low_frequency_ratio(np.zeros(40)) == 1.0
    assert low_frequency_ratio(np.full(40, 3.0)) == 1.0


@pytest.mark.parametrize('cycles,expected', [(2, 1.0), (3, 1.0), (6, 1.0), (1, 0.0), (10, 0.0)])
def test_low_frequency_ratio_of_pure_tones(cycles, expected):
    t = np.arange(48)
    signal = np.cos(2 * math.pi * cycles * t / 48)
    assert low_frequency_ratio(signal) == pytest.approx(expected, abs=1e-9)


def test_path_stability_reductions():
    t = np.arange(40)
    path = CameraPath(np.cos(2 * math.pi * 3 * t / 40), np.cos(2 * math.pi * 12 * t / 40), np.zeros(40))
    mean, channels = path_stability(path)
    assert channels == pytest.approx({'tx': 1.0, 'ty': 0.0, 'theta': 1.0}, abs=1e-9)
    assert mean == pytest.approx(2 / 3)
    assert path_stability(path, reduce='min')[0] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(MetricError):
        path_stability(path, reduce='median')


def test_camera_path_accumulates_transforms():
    c = (0.0, 0.0)
    path = CameraPath.from_transforms([RigidTransform(0.01, 1.0, 2.0, c), RigidTransform(0.02, -1.0, 0.5, c)])
    assert path.tx.tolist() == [0.0, 1.0, 0.0]
    assert path.ty.tolist() == [0.0, 2.0, 2.5]
    assert path.theta == pytest.approx([0.0, 0.01, 0.03])


@pytest.mark.parametrize('scale,expected', [(1.25, 0.8), (1.0, 1.0), (0.9, 1.0)])
def test_crop_ratio(scale, expected):
    affine = AffineTransform(np.eye(2) * scale, np.zeros(2), (10.0, 10.0))
    assert crop_ratio(affine) == pytest.approx(expected)


def test_evaluate_static_video_against_itself_is_perfect():
    video = static_video()
    report = evaluate(video, video, workers=2)
    assert report.stability == 1.0
    assert report.cropping == 1.0
    assert report.distortion == 1.0
    assert report.frames == N
    assert all(entry['fitted'] for entry in report.per_frame)


def test_stability_prefers_smooth_paths():
    scene = render_procedural_scene(N, 48, 48, seed=3, sprites=0)
    smooth = ShakeProfile(0.0, 0.0, (3.0, 2.0, 0.01), (12.0, 9.0, 18.0), 0.5, seed=1)
    shaky = ShakeProfile(0.004, 1.5, (0.0, 0.0, 0.0), (64.0, 96.0, 128.0), 0.0, seed=1)
    smooth_score = stability_score(synthesize_pair(scene, smooth).stable)
    shaky_score = stability_score(synthesize_pair(scene, shaky).unstable)
    assert smooth_score > 0.7
    assert shaky_score < smooth_score - 0.2


def test_stability_needs_enough_frames():
    with pytest.raises(MetricError, match='at least 32'):
        stability_score(static_video(n=10))


def test_zoomed_video_loses_crop_but_not_shape():
    video = static_video(n=4, size=64)
    zoom = AffineTransform(np.eye(2) * 1.1, np.zeros(2), image_center(64, 64))
    zoomed = FrameSequence(np.stack([warp_affine_array(f, zoom) for f in video.data]))
    assert cropping_score(video, zoomed) == pytest.approx(1 / 1.1, abs=0.03)
    assert distortion_score(video, zoomed) == pytest.approx(1.0, abs=0.03)


def test_score_inputs_must_match():
    with pytest.raises(MetricError):
        cropping_score(static_video(n=4), static_video(n=5))


@pytest.fixture(scope='module')
def dim_pair():
    scene = render_procedural_scene(N, 48, 48, seed=3, sprites=0)
    pair = synthesize_pair(scene, ShakeProfile(rotation_std=0.002, translation_std=0.8, seed=2))
    # compressed into [0.2, 0.6] so scaling by 1.5 never clips
    return 0.2 + 0.4 * pair.unstable.data, 0.2 + 0.4 * pair.stable.data


@pytest.mark.parametrize('gain', [0.5, 0.8, 1.25, 1.5])
def test_metrics_ignore_global_brightness(dim_pair, gain):
    original, stabilized = dim_pair
    base = evaluate(FrameSequence(original), FrameSequence(stabilized), workers=2)
    scaled = evaluate(FrameSequence(gain * original), FrameSequence(gain * stabilized), workers=2)
    assert scaled.stability == pytest.approx(base.stability, abs=0.01)
    assert scaled.cropping == pytest.approx(base.cropping, abs=0.01)
    assert scaled.distortion == pytest.approx(base.distortion, abs=0.01)


def test_precomputed_flows_reproduce_the_score(dim_pair):
    stabilized = FrameSequence(dim_pair[1])
    flows = global_flows(stabilized, workers=2)
    assert len(flows) == N - 1
    assert stability_score(stabilized, workers=2, flows=flows) == stability_score(stabilized, workers=2)
    with pytest.raises(MetricError, match='flows'):
        stability_score(stabilized, flows=flows[:-1])
