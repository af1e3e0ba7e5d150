import math

import numpy as np
import pytest

from metastab.errors import FlowEstimationError, ShapeError
from metastab.flow import dense_flow, global_flow, pyramid_levels
from metastab.synthetic import render_procedural_scene
from metastab.transforms import RigidTransform, image_center, warp_array

INTERIOR = np.s_[12:-12, 12:-12]


def textured(size=96, seed=3):
    return render_procedural_scene(1, size, size, seed=seed, sprites=0, margin=0.0).canvas[0]


@pytest.mark.parametrize('shape,levels', [
    ((31, 100), 1),
    ((32, 32), 1),
    ((63, 80), 1),
    ((64, 64), 2),
    ((128, 200), 3),
])
def test_pyramid_levels(shape, levels):
    assert pyramid_levels(*shape) == levels


def test_dense_flow_recovers_translation():
    a = textured()
    b = warp_array(a, RigidTransform(0.0, 1.5, -1.0, image_center(96, 96)))
    flow = dense_flow(a, b)
    assert flow.u.dtype == np.float32
    assert np.median(flow.u[INTERIOR]) == pytest.approx(1.5, abs=0.25)
    assert np.median(flow.v[INTERIOR]) == pytest.approx(-1.0, abs=0.25)
    assert np.all((flow.confidence >= 0) & (flow.confidence <= 1))


def test_dense_flow_of_identical_frames_is_zero():
    a = textured()
    flow = dense_flow(a, a)
    assert np.max(np.abs(flow.u)) < 1e-3
    assert np.max(np.abs(flow.v)) < 1e-3


def test_dense_flow_shape_mismatch():
    with pytest.raises(ShapeError):
        dense_flow(np.zeros((32, 32, 3)), np.zeros((32, 40, 3)))


def test_global_flow_recovers_rigid_motion():
    truth = RigidTransform(math.radians(0.5), 2.0, 1.0, image_center(96, 96))
    a = textured()
    flow = global_flow(a, warp_array(a, truth))
    assert flow.rigid.theta == pytest.approx(truth.theta, abs=math.radians(0.2))
    assert flow.rigid.tx == pytest.approx(2.0, abs=0.3)
    assert flow.rigid.ty == pytest.approx(1.0, abs=0.3)
    assert flow.inliers.mean() > 0.3


def test_global_flow_replaces_moving_object_with_camera_motion():
    a = textured()
    truth = RigidTransform(0.0, 1.0, 0.0, image_center(96, 96))
    b = warp_array(a, truth)
    # a patch that moves on its own by six pixels
    b[30:50, 30:50] = a[30:50, 24:44]
    flow = global_flow(a, b)
    assert flow.rigid.tx == pytest.approx(1.0, abs=0.3)
    outliers = ~flow.inliers
    assert outliers[34:46, 34:46].mean() > 0.5
    ru, rv = flow.rigid.flow(96, 96)
    np.testing.assert_allclose(flow.u[outliers], ru[outliers], atol=1e-4)
    np.testing.assert_allclose(flow.v[outliers], rv[outliers], atol=1e-4)


def test_global_flow_is_robust_to_border_crop():
    full = textured(128)
    truth = RigidTransform(0.0, 1.2, -0.8, image_center(128, 128))
    moved = warp_array(full, truth)
    crop = np.s_[10:-10, 10:-10]
    a = global_flow(full, moved).rigid
    b = global_flow(full[crop], moved[crop]).rigid
    assert abs(a.theta - b.theta) < math.radians(0.05)
    assert abs(a.tx - b.tx) < 0.3
    assert abs(a.ty - b.ty) < 0.3


def test_global_flow_fails_on_blank_frames():
    blank = np.full((48, 48, 3), 0.5)
    with pytest.raises(FlowEstimationError, match='no dominant rigid motion'):
        global_flow(blank, blank)
