import numpy as np
import pytest

from metastab.autodiff import Tensor
from metastab.errors import ShapeError
from metastab.frames import FrameSequence
from metastab.synthesis import SynthesisNet, TemporalWindow, build_windows, stabilize_video, synthesize


def video(n=6, h=32, w=32, seed=0):
    return FrameSequence(np.random.default_rng(seed).uniform(size=(n, h, w, 3)).astype(np.float32))


@pytest.fixture
def net():
    return SynthesisNet(k=1, base_width=4)


def test_zero_residual_is_identity(net):
    seq = video()
    out = stabilize_video(seq, net, net.init_parameters(seed=0))
    assert out.role == 'synthesized'
    np.testing.assert_array_equal(out.data, seq.data)


def test_zero_residual_recurrent_is_identity(net):
    seq = video()
    out = stabilize_video(seq, net, net.init_parameters(), recurrent=True)
    np.testing.assert_array_equal(out.data, seq.data)


def test_output_length_and_range(net):
    seq = video(n=5)
    params = net.init_parameters(seed=1, zero_residual=False)
    out = stabilize_video(seq, net, params)
    assert len(out) == len(seq)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert not np.array_equal(out.data, seq.data)


def test_batching_and_workers_do_not_change_output(net):
    seq = video(n=7)
    params = net.init_parameters(seed=2, zero_residual=False)
    serial = stabilize_video(seq, net, params, workers=1, batch_windows=7)
    parallel = stabilize_video(seq, net, params, workers=3, batch_windows=2)
    np.testing.assert_allclose(serial.data, parallel.data, atol=1e-6)


def test_recurrent_differs_from_sliding_window(net):
    seq = video(n=5)
    params = net.init_parameters(seed=3, zero_residual=False)
    plain = stabilize_video(seq, net, params)
    recurrent = stabilize_video(seq, net, params, recurrent=True)
    np.testing.assert_allclose(plain.data[0], recurrent.data[0], atol=1e-6)
    assert not np.allclose(plain.data[1:], recurrent.data[1:])


def test_odd_sizes_are_padded_and_cropped(net):
    seq = video(n=3, h=34, w=38)
    out = stabilize_video(seq, net, net.init_parameters(seed=4, zero_residual=False))
    assert (out.height, out.width) == (34, 38)


def test_window_layout_puts_center_frame_in_middle_channels():
    frames = np.random.default_rng(5).uniform(size=(5, 32, 32, 3)).astype(np.float32)
    windows = build_windows(frames, k=1)
    assert windows.shape == (3, 9, 32, 32)
    np.testing.assert_array_equal(windows[0, 3:6], frames[1].transpose(2, 0, 1))
    with pytest.raises(ShapeError):
        build_windows(frames, k=1, centers=[0])


def test_synthesize_single_window(net):
    frames = video(n=3).data
    window = TemporalWindow(frames, k=1)
    out = synthesize(window, net, net.init_parameters())
    np.testing.assert_array_equal(out, frames[1])
    with pytest.raises(ShapeError):
        synthesize(TemporalWindow(video(n=5).data, k=2), net, net.init_parameters())


def test_window_needs_2k_plus_1_frames():
    with pytest.raises(ShapeError):
        TemporalWindow(np.zeros((4, 32, 32, 3)), k=2)


def test_forward_rejects_wrong_channel_count(net):
    with pytest.raises(ShapeError):
        net.forward(net.init_parameters(), Tensor(np.zeros((1, 15, 32, 32))))


def test_from_parameters_infers_architecture(net):
    params = net.init_parameters()
    assert sum(p.data.size for p in params.values()) == net.num_parameters()
    restored = SynthesisNet.from_parameters({name: p.data for name, p in params.items()})
    assert (restored.k, restored.base_width) == (1, 4)


def test_from_parameters_rejects_bad_shapes(net):
    arrays = {name: p.data for name, p in net.init_parameters().items()}
    arrays['dec2.w'] = np.zeros((4, 4, 3, 3))
    with pytest.raises(ShapeError, match='dec2.w'):
        SynthesisNet.from_parameters(arrays)
    with pytest.raises(ShapeError, match='enc1.w'):
        SynthesisNet.from_parameters({})


def test_inner_loss_reaches_every_parameter():
    from metastab import autodiff as ad
    from metastab.losses import FeatureExtractor, LossWeights, inner_loss

    net = SynthesisNet(k=1, base_width=2)
    params = net.init_parameters(seed=3, zero_residual=False)
    frames = video(n=5, seed=4).data
    windows = build_windows(frames, k=1)
    breakdown = inner_loss(net, params, windows, frames[1:4], LossWeights(), FeatureExtractor((4, 8), seed=0))
    ad.backward(breakdown.total)
    silent = [name for name in params.names() if params[name].grad is None or not np.any(params[name].grad)]
    assert silent == []
