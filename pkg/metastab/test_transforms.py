import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metastab.errors import AlignmentError
from metastab.transforms import (
    AffineTransform,
    RigidTransform,
    fit_affine,
    fit_rigid_procrustes,
    image_center,
    pixel_grid,
    sample_flow,
    warp_affine_array,
    warp_array,
)

H, W = 48, 64
CENTER = image_center(H, W)


def smooth_image(h=H, w=W):
    xs, ys = pixel_grid(h, w)
    return (0.5 + 0.2 * np.sin(xs / 5.0) + 0.2 * np.cos(ys / 7.0)).astype(np.float32)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-math.radians(5), math.radians(5)),
    st.floats(-20, 20),
    st.floats(-20, 20),
)
def test_procrustes_recovers_rigid_warp(theta, tx, ty):
    truth = RigidTransform(theta, tx, ty, CENTER)
    u, v = truth.flow(H, W)
    fitted = fit_rigid_procrustes(u, v)
    assert abs(fitted.theta - theta) < 1e-4
    assert abs(fitted.tx - tx) < 1e-3
    assert abs(fitted.ty - ty) < 1e-3


def test_procrustes_ignores_zero_weight_pixels():
    truth = RigidTransform(0.03, 4.0, -2.5, CENTER)
    u, v = truth.flow(H, W)
    u[:10, :10] += 30.0
    weights = np.ones((H, W))
    weights[:10, :10] = 0.0
    fitted = fit_rigid_procrustes(u, v, weights)
    assert fitted.theta == pytest.approx(0.03, abs=1e-9)
    assert fitted.tx == pytest.approx(4.0, abs=1e-6)


def test_procrustes_zero_flow_is_identity():
    fitted = fit_rigid_procrustes(np.zeros((H, W)), np.zeros((H, W)))
    assert fitted.theta == 0.0
    assert abs(fitted.tx) < 1e-12 and abs(fitted.ty) < 1e-12


def test_procrustes_needs_three_points():
    weights = np.zeros((H, W))
    weights[0, :2] = 1.0
    with pytest.raises(AlignmentError, match="at least 3"):
        fit_rigid_procrustes(np.zeros((H, W)), np.zeros((H, W)), weights)


def test_procrustes_rejects_collinear_points():
    weights = np.zeros((H, W))
    weights[5, :] = 1.0
    with pytest.raises(AlignmentError, match="collinear"):
        fit_rigid_procrustes(np.zeros((H, W)), np.zeros((H, W)), weights)


def test_rigid_rejects_quarter_turn():
    with pytest.raises(AlignmentError):
        RigidTransform(math.pi / 2)


def test_inverse_and_compose():
    t = RigidTransform(0.05, 3.0, -1.0, CENTER)
    xs, ys = pixel_grid(H, W)
    back = t.inverse().compose(t)
    bx, by = back.apply(xs, ys)
    np.testing.assert_allclose(bx, xs, atol=1e-9)
    np.testing.assert_allclose(by, ys, atol=1e-9)

    s = RigidTransform(-0.02, -4.0, 2.0, CENTER)
    sx, sy = t.compose(s).apply(xs, ys)
    ex, ey = t.apply(*s.apply(xs, ys))
    np.testing.assert_allclose(sx, ex, atol=1e-9)
    np.testing.assert_allclose(sy, ey, atol=1e-9)


def test_compose_with_identity_is_exact():
    t = RigidTransform(0.05, 3.0, -1.0, CENTER)
    assert t.compose(RigidTransform.identity(CENTER)) is t
    assert RigidTransform.identity(CENTER).compose(t) is t


def test_matrix_matches_apply():
    t = RigidTransform(0.1, 2.0, 5.0, CENTER)
    m = t.matrix()
    x, y = t.apply(np.array([3.0]), np.array([7.0]))
    np.testing.assert_allclose(m @ [3.0, 7.0, 1.0], [x[0], y[0], 1.0])
    assert RigidTransform.from_matrix(m, CENTER).theta == pytest.approx(0.1)


def test_dict_roundtrip():
    t = RigidTransform(0.01, -2.0, 0.5, CENTER)
    assert RigidTransform.from_dict(t.as_dict()) == t


def test_affine_zero_flow_is_exact_identity():
    fitted = fit_affine(np.zeros((H, W)), np.zeros((H, W)))
    np.testing.assert_array_equal(fitted.linear, np.eye(2))
    assert fitted.scale == 1.0
    assert fitted.anisotropy == 1.0


@pytest.mark.parametrize('linear,scale,anisotropy', [
    ([[1.1, 0.0], [0.0, 1.1]], 1.1, 1.0),
    ([[1.0, 0.0], [0.0, 0.5]], math.sqrt(0.5), 0.5),
    ([[math.cos(0.1), -math.sin(0.1)], [math.sin(0.1), math.cos(0.1)]], 1.0, 1.0),
])
def test_affine_fit_recovers_linear_part(linear, scale, anisotropy):
    truth = AffineTransform(np.array(linear), np.array([1.5, -2.0]), CENTER)
    xs, ys = pixel_grid(H, W)
    px, py = truth.apply(xs, ys)
    fitted = fit_affine(px - xs, py - ys)
    np.testing.assert_allclose(fitted.linear, linear, atol=1e-9)
    np.testing.assert_allclose(fitted.translation, [1.5, -2.0], atol=1e-9)
    assert fitted.scale == pytest.approx(scale)
    assert fitted.anisotropy == pytest.approx(anisotropy)


def test_identity_warp_is_exact():
    image = np.random.default_rng(0).uniform(size=(H, W, 3)).astype(np.float32)
    np.testing.assert_array_equal(warp_array(image, RigidTransform.identity(CENTER)), image)
    np.testing.assert_array_equal(warp_affine_array(image, AffineTransform.identity(CENTER)), image)


def test_warp_moves_content_along_flow():
    image = smooth_image()
    t = RigidTransform(0.02, 2.5, -1.5, CENTER)
    warped = warp_array(image, t)
    u, v = t.flow(H, W)
    restored = sample_flow(warped, u, v)
    interior = np.s_[8:-8, 8:-8]
    np.testing.assert_allclose(restored[interior], image[interior], atol=0.02)


def test_integer_translation_shifts_pixels():
    image = np.random.default_rng(1).uniform(size=(H, W)).astype(np.float32)
    warped = warp_array(image, RigidTransform(0.0, 3.0, 2.0, CENTER))
    np.testing.assert_allclose(warped[2:, 3:], image[:-2, :-3], atol=1e-6)


@pytest.mark.parametrize('scale', [0.9, 1.1])
def test_procrustes_on_pure_zoom_is_identity(scale):
    xs, ys = pixel_grid(H, W)
    cx, cy = CENTER
    t = fit_rigid_procrustes((scale - 1.0) * (xs - cx), (scale - 1.0) * (ys - cy))
    assert t.theta == pytest.approx(0.0, abs=1e-9)
    assert (t.tx, t.ty) == pytest.approx((0.0, 0.0), abs=1e-9)


@pytest.mark.parametrize('theta, tx, ty', [(0.0, 2.5, -1.5), (math.radians(2.0), -3.25, 0.75), (-0.03, 0.4, 4.6)])
def test_warp_then_inverse_restores_interior(theta, tx, ty):
    from scipy import ndimage

    from metastab.synthetic import render_procedural_scene

    frame = render_procedural_scene(1, 64, 64, seed=4, sprites=0, margin=0.0).canvas[0]
    frame = ndimage.gaussian_filter(frame, sigma=(2.0, 2.0, 0.0))
    t = RigidTransform(theta, tx, ty, image_center(64, 64))
    restored = warp_array(warp_array(frame, t), t.inverse())
    interior = np.s_[6:58, 6:58]  # central 80%
    mse = np.mean((restored[interior] - frame[interior]) ** 2)
    assert 10 * math.log10(1.0 / max(mse, 1e-12)) > 35.0
