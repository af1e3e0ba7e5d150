import math

import numpy as np
import pytest

from metastab import autodiff as ad
from metastab.autodiff import Tensor
from metastab.errors import ShapeError
from metastab.frames import Frame, FrameSequence
from metastab.rigid import (
    AffineRegressor,
    align_sequence,
    decode_output,
    encode_flow,
    encode_target,
    evaluate_regressor,
    train_affine_regressor,
    warp,
    warp_tensor,
)
from metastab.synthetic import render_procedural_scene
from metastab.transforms import RigidTransform, image_center, warp_array

CENTER = image_center(64, 64)


def test_warp_identity_on_every_input_kind():
    image = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)
    identity = RigidTransform.identity(image_center(32, 32))
    np.testing.assert_array_equal(warp(image, identity), image)
    frame = warp(Frame(image, index=4), identity)
    assert frame.index == 4
    np.testing.assert_array_equal(frame.data, image)
    tensor = warp(Tensor(image.transpose(2, 0, 1)[None]), identity)
    np.testing.assert_allclose(tensor.data[0].transpose(1, 2, 0), image, atol=1e-6)


def test_tensor_warp_matches_array_warp_and_propagates_gradients():
    image = np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32)
    t = RigidTransform(0.03, 1.5, -2.0, image_center(32, 32))
    x = Tensor(image.transpose(2, 0, 1)[None], requires_grad=True)
    out = warp(x, t)
    np.testing.assert_allclose(out.data[0].transpose(1, 2, 0), warp_array(image, t), atol=1e-4)
    ad.backward(ad.sum_(out))
    assert x.grad is not None and x.grad.sum() > 0


def test_warp_tensor_needs_one_transform_per_image():
    with pytest.raises(ShapeError):
        warp_tensor(Tensor(np.zeros((2, 3, 32, 32))), [RigidTransform.identity(CENTER)])


def test_encode_flow_of_translation():
    u, v = RigidTransform(0.0, 8.0, -4.0, CENTER).flow(64, 64)
    encoded = encode_flow(u, v, size=16)
    assert encoded.shape == (3, 16, 16)
    np.testing.assert_allclose(encoded[0], 0.25)
    np.testing.assert_allclose(encoded[1], -0.125)


def test_encode_flow_rotation_moment_is_positive():
    u, v = RigidTransform(0.05, 0.0, 0.0, CENTER).flow(64, 64)
    assert encode_flow(u, v)[2].mean() > 0


def test_target_roundtrip():
    t = RigidTransform(0.04, 3.0, -6.0, CENTER)
    back = decode_output(encode_target(t, 64, 64), 64, 64)
    assert back.theta == pytest.approx(0.04)
    assert back.tx == pytest.approx(3.0)
    assert back.ty == pytest.approx(-6.0)
    assert back.center == CENTER


def test_regressor_parameters_roundtrip():
    regressor = AffineRegressor.create(widths=(4, 8), seed=3)
    assert regressor.depth == 2
    arrays = {name: p.data for name, p in regressor.params.items()}
    restored = AffineRegressor.from_parameters(arrays)
    u, v = RigidTransform(0.01, 2.0, 1.0, CENTER).flow(64, 64)
    a, b = regressor.predict((u, v)), restored.predict((u, v))
    assert a.theta == pytest.approx(b.theta) and a.tx == pytest.approx(b.tx)


def test_regressor_parameters_missing_head():
    with pytest.raises(ShapeError, match='missing'):
        AffineRegressor.from_parameters({'conv1.w': np.zeros((4, 3, 3, 3))})


def test_training_reduces_loss():
    result = train_affine_regressor(steps=60, batch_size=16, samples=48, frame_size=32, seed=2)
    assert result.final_loss < result.initial_loss
    assert len(result.losses) == 60
    errors = evaluate_regressor(result.regressor, count=5, frame_size=32)
    assert set(errors) == {'theta_deg', 'translation_px'}


def test_align_sequence_undoes_camera_motion():
    scene = render_procedural_scene(1, 64, 64, seed=5, sprites=0, margin=0.0)
    reference = scene.canvas[0]
    motions = [RigidTransform(0.0, 1.5, -1.0, CENTER), RigidTransform(math.radians(0.5), -1.0, 2.0, CENTER)]
    frames = np.stack([reference] + [warp_array(reference, m) for m in motions])
    aligned = align_sequence(FrameSequence(frames))
    assert len(aligned) == 3
    np.testing.assert_array_equal(aligned.frames[0], reference)
    interior = np.s_[10:-10, 10:-10]
    for t, motion in enumerate(motions, start=1):
        assert aligned.fitted[t].tx == pytest.approx(motion.tx, abs=0.3)
        assert aligned.fitted[t].ty == pytest.approx(motion.ty, abs=0.3)
        assert np.mean(np.abs(aligned.frames[t][interior] - reference[interior])) < 0.03
    assert aligned.as_sequence().role == 'aligned'


def test_align_sequence_needs_two_frames():
    with pytest.raises(ShapeError):
        align_sequence(np.zeros((1, 32, 32, 3)))


def test_trained_regressor_beats_untrained_by_a_wide_margin():
    result = train_affine_regressor(steps=600, batch_size=32, samples=256, frame_size=32, seed=0)
    trained = evaluate_regressor(result.regressor, count=8, frame_size=32, seed=11)
    untrained = evaluate_regressor(AffineRegressor.create(seed=0), count=8, frame_size=32, seed=11)
    assert trained['theta_deg'] < 1.0
    assert trained['translation_px'] < 2.0
    assert untrained['theta_deg'] >= 5 * trained['theta_deg']
    assert untrained['translation_px'] >= 5 * trained['translation_px']
