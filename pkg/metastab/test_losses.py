import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from metastab import autodiff as ad
from metastab.autodiff import Tensor
from metastab.errors import ConfigError, ShapeError
from metastab.losses import (
    FeatureExtractor,
    LossWeights,
    contextual_similarity,
    frames_to_tensor,
    gram_matrices,
    inner_loss,
    inner_quality,
    inner_stability,
    outer_loss,
    outer_stability,
    quality_terms,
    surrogate_flow,
    surrogate_levels,
)
from metastab.synthesis import SynthesisNet, build_windows
from metastab.synthetic import render_procedural_scene
from metastab.transforms import pixel_grid


@pytest.fixture
def float64():
    with ad.default_dtype(np.float64):
        yield


def smooth_frames(n=3, h=32, w=32, shift=0.0, offsets=None):
    xs, ys = pixel_grid(h, w)
    offsets = [0.0] * n if offsets is None else offsets
    frames = []
    for t in range(n):
        x = xs - shift * t - offsets[t]
        base = 0.5 + 0.2 * np.sin(x / 4.0) * np.cos(ys / 5.0) + 0.1 * np.cos((x + ys) / 6.0)
        frames.append(np.stack([base, 0.9 * base, 1.1 * base - 0.05], axis=-1))
    return np.clip(np.stack(frames), 0, 1)


@pytest.mark.parametrize('kwargs', [
    {'lambda_s': -1.0},
    {'lambda_p': -0.5},
    {'lambda_s': 0.0, 'lambda_p': 0.0},
])
def test_loss_weights_validation(kwargs):
    with pytest.raises(ConfigError):
        LossWeights(**kwargs)


def test_frames_to_tensor_layout():
    frames = np.zeros((2, 32, 40, 3))
    assert frames_to_tensor(frames).shape == (2, 3, 32, 40)
    with pytest.raises(ShapeError):
        frames_to_tensor(np.zeros((2, 3, 32, 32)))


@pytest.mark.parametrize('shape,levels', [((32, 32), 2), ((64, 64), 3), ((30, 30), 1), ((48, 64), 2)])
def test_surrogate_levels(shape, levels):
    assert surrogate_levels(*shape) == levels


def test_surrogate_flow_recovers_shift():
    frames = smooth_frames(2, shift=1.0)
    a, b = frames_to_tensor(frames[:1]), frames_to_tensor(frames[1:])
    u, v = surrogate_flow(a, b)
    interior = np.s_[0, 6:-6, 6:-6]
    assert np.median(u.data[interior]) == pytest.approx(1.0, abs=0.3)
    assert abs(np.median(v.data[interior])) < 0.3


def test_inner_stability_is_zero_for_identical_frames():
    frames = smooth_frames(2)
    value = inner_stability(frames_to_tensor(frames), frames)
    assert value.item() < 1e-6


def test_contextual_similarity_prefers_matching_sets(float64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(40, 8)))
    other = Tensor(rng.normal(size=(40, 8)))
    same = contextual_similarity(x, x).item()
    different = contextual_similarity(other, x).item()
    assert same > 0.99
    assert 0.0 < different < same


def test_contextual_similarity_ignores_order(float64):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 6))
    shuffled = x[rng.permutation(30)]
    y = rng.normal(size=(30, 6))
    a = contextual_similarity(Tensor(x), Tensor(y)).item()
    b = contextual_similarity(Tensor(shuffled), Tensor(y)).item()
    assert a == pytest.approx(b, rel=1e-9)


def test_contextual_similarity_shape_checks():
    with pytest.raises(ShapeError):
        contextual_similarity(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        contextual_similarity(Tensor(np.ones((0, 3))), Tensor(np.ones((4, 3))))


def test_gram_matrices_are_symmetric():
    feature = Tensor(np.random.default_rng(2).normal(size=(2, 4, 5, 6)))
    gram = gram_matrices(feature).data
    assert gram.shape == (2, 4, 4)
    np.testing.assert_allclose(gram, gram.transpose(0, 2, 1), atol=1e-6)


def test_feature_extractor_is_seeded_and_frozen():
    a, b = FeatureExtractor((4, 8), seed=3), FeatureExtractor((4, 8), seed=3)
    np.testing.assert_array_equal(a.params['stage1.w'].data, b.params['stage1.w'].data)
    assert not a.params['stage1.w'].requires_grad
    features = a(frames_to_tensor(smooth_frames(1)))
    assert [f.shape for f in features] == [(1, 4, 16, 16), (1, 8, 8, 8)]


def _tiny_problem():
    net = SynthesisNet(k=1, base_width=2)
    params = net.init_parameters(seed=5, zero_residual=False)
    frames = 0.2 + 0.6 * smooth_frames(5, shift=0.7)
    windows = build_windows(frames, k=1)
    aligned = frames[1:4]
    return net, params, windows, aligned


def test_inner_loss_gradients_match_finite_differences(float64):
    net, params, windows, aligned = _tiny_problem()
    extractor = FeatureExtractor((4, 8), seed=0)
    weights = LossWeights(10.0, 1.0)

    def loss():
        return inner_loss(net, params, windows, aligned, weights, extractor).total

    breakdown = inner_loss(net, params, windows, aligned, weights, extractor)
    assert breakdown.is_finite
    assert breakdown.value == pytest.approx(10.0 * breakdown.stability + breakdown.quality, rel=1e-9)
    ad.backward(breakdown.total)
    for name in ('dec4.w', 'enc1.b'):
        tensor = params[name]
        indices = list(range(0, tensor.data.size, max(1, tensor.data.size // 4)))[:4]
        numeric = ad.finite_difference_gradient(loss, tensor, h=1e-6, indices=indices).reshape(-1)
        analytic = tensor.grad.reshape(-1)
        scale = max(np.max(np.abs(numeric[indices])), 1e-8)
        assert np.max(np.abs(analytic[indices] - numeric[indices])) / scale < 1e-4


def test_inner_loss_record_carries_weights():
    net, params, windows, aligned = _tiny_problem()
    record = inner_loss(net, params, windows, aligned, LossWeights(5.0, 2.0), FeatureExtractor((4, 8))).as_record()
    assert record['lambda_s'] == 5.0 and record['lambda_p'] == 2.0
    assert set(record) >= {'total', 'stability', 'quality', 'perceptual', 'gram', 'contextual'}


def test_inner_loss_window_count_mismatch():
    net, params, windows, aligned = _tiny_problem()
    with pytest.raises(ShapeError):
        inner_loss(net, params, windows[:2], aligned, LossWeights(), FeatureExtractor((4, 8)))


def test_outer_loss_prefers_ground_truth():
    stable = smooth_frames(3, shift=0.5)
    jittered = stable.copy()
    jittered[1] = smooth_frames(3, shift=2.0)[1]
    extractor = FeatureExtractor((4, 8))
    exact = outer_loss(frames_to_tensor(stable), stable, extractor)
    off = outer_loss(frames_to_tensor(jittered), stable, extractor)
    assert exact.stability < 1e-6
    assert off.value > exact.value


# ============================================================================
# OBJECTIVE BEHAVIOUR
# ============================================================================

def test_outer_stability_ignores_constant_drift_but_not_jitter():
    stable = smooth_frames(4, shift=0.5)
    drift = smooth_frames(4, shift=0.5, offsets=[1.0] * 4)
    jitter = smooth_frames(4, shift=0.5, offsets=[0.0, 1.0, 0.0, 1.0])
    drifted = outer_stability(frames_to_tensor(drift), stable).item()
    jittered = outer_stability(frames_to_tensor(jitter), stable).item()
    assert drifted < 0.1
    assert jittered > 0.5
    assert jittered > 10 * drifted


def test_inner_stability_measures_residual_shift():
    frames = smooth_frames(2, 64, 64, shift=2.0)
    value = inner_stability(frames_to_tensor(frames[1:]), frames[:1]).item()
    assert value == pytest.approx(2.0, abs=0.3)


def test_inner_stability_falls_as_frame_blends_into_reference():
    frames = smooth_frames(2, shift=1.0)
    values = []
    for weight in (0.0, 0.5, 1.0):
        blended = (1 - weight) * frames[1:] + weight * frames[:1]
        values.append(inner_stability(frames_to_tensor(blended), frames[:1]).item())
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-6


@pytest.fixture
def scene_frame():
    return render_procedural_scene(1, 32, 32, seed=6, sprites=0, margin=0.0).canvas[:1]


def test_inner_quality_ranks_degradations(scene_frame):
    extractor = FeatureExtractor((8, 16), seed=0)
    blurred = ndimage.gaussian_filter(scene_frame, sigma=(0, 1.5, 1.5, 0))
    noisy = np.clip(scene_frame + np.random.default_rng(0).normal(0, 0.2, scene_frame.shape), 0, 1)
    clean, blur, noise = (inner_quality(frames_to_tensor(x), scene_frame, extractor).item()
                          for x in (scene_frame, blurred, noisy))
    assert noise > blur > clean


def test_quality_terms_vanish_for_identical_frames(scene_frame):
    terms = quality_terms(frames_to_tensor(scene_frame), scene_frame, FeatureExtractor((8, 16), seed=0))
    assert terms['perceptual'].item() == 0.0
    assert terms['gram'].item() == 0.0
    assert terms['contextual'].item() <= 1e-3


@pytest.mark.parametrize('lambda_s, lambda_p', [(0.0, 1.0), (0.0, 3.0), (1.0, 0.0), (2.0, 0.5), (10.0, 1.0)])
def test_inner_loss_is_linear_in_weights(lambda_s, lambda_p):
    net, params, windows, aligned = _tiny_problem()
    extractor = FeatureExtractor((4, 8), seed=0)
    unit = inner_loss(net, params, windows, aligned, LossWeights(1.0, 1.0), extractor)
    weighted = inner_loss(net, params, windows, aligned, LossWeights(lambda_s, lambda_p), extractor)
    assert weighted.stability == unit.stability
    assert weighted.quality == unit.quality
    assert weighted.value == pytest.approx(lambda_s * unit.stability + lambda_p * unit.quality, rel=1e-5, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.floats(-1, 1)),
    arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.floats(-1, 1)),
)
def test_contextual_similarity_is_in_unit_interval(x, y):
    with ad.default_dtype(np.float64):
        cx = contextual_similarity(Tensor(x), Tensor(y)).item()
    assert 0.0 < cx <= 1.0 + 1e-9


def test_contextual_similarity_of_single_matching_vector_is_one(float64):
    x = Tensor(np.array([[0.3, -0.2, 0.9]]))
    assert contextual_similarity(x, x).item() == pytest.approx(1.0, abs=1e-9)
