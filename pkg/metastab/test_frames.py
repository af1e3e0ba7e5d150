import numpy as np
import pytest
from PIL import Image

from metastab.errors import FrameSequenceError
from metastab.frames import FrameSequence, load_sequence, pad_boundary_frames, save_sequence, to_uint8


def quantized_frames(n=4, h=32, w=40, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, h, w, 3)).astype(np.float32) / 255.0


@pytest.mark.parametrize('frames,message', [
    ([], 'no frames'),
    ([np.zeros((32, 32, 3)), np.zeros((40, 32, 3))], 'mixed resolutions'),
    (np.zeros((2, 16, 64, 3)), '≥ 32'),
    (np.full((2, 32, 32, 3), 1.5), r'\[0, 1\]'),
    (np.zeros((2, 32, 32)), 'N×H×W×3'),
])
def test_sequence_validation(frames, message):
    with pytest.raises(FrameSequenceError, match=message):
        FrameSequence(frames)


def test_unknown_role():
    with pytest.raises(FrameSequenceError, match='role'):
        FrameSequence(quantized_frames(), role='shaky')


def test_indexing_and_slicing():
    seq = FrameSequence(quantized_frames(5), start_index=10)
    assert len(seq) == 5
    assert seq[2].index == 12
    assert [f.index for f in seq.slice(1, 3)] == [11, 12]
    assert seq.with_role('stable').role == 'stable'
    assert (seq.height, seq.width) == (32, 40)


def test_save_then_load_is_bit_exact(tmp_path):
    seq = FrameSequence(quantized_frames())
    paths = save_sequence(seq, tmp_path / 'out')
    assert [p.name for p in paths] == ['000000.png', '000001.png', '000002.png', '000003.png']
    loaded = load_sequence(tmp_path / 'out', workers=2)
    np.testing.assert_array_equal(loaded.data, seq.data)
    assert loaded.start_index == 0


def _write(folder, index, value=0):
    folder.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((32, 32, 3), value, dtype=np.uint8)).save(folder / f'{index:06d}.png')


def test_load_orders_by_index_and_ignores_other_files(tmp_path):
    for i in (2, 0, 1):
        _write(tmp_path, i, value=i * 10)
    (tmp_path / 'manifest.json').write_text('{}')
    seq = load_sequence(tmp_path)
    assert [int(round(f.data[0, 0, 0] * 255)) for f in seq] == [0, 10, 20]


def test_load_reports_gap(tmp_path):
    for i in (1, 2, 4):
        _write(tmp_path, i)
    with pytest.raises(FrameSequenceError, match='gap at 3'):
        load_sequence(tmp_path)


def test_load_empty_directory(tmp_path):
    with pytest.raises(FrameSequenceError, match='no frames'):
        load_sequence(tmp_path)


def test_load_mixed_resolutions(tmp_path):
    _write(tmp_path, 0)
    Image.fromarray(np.zeros((40, 32, 3), dtype=np.uint8)).save(tmp_path / '000001.png')
    with pytest.raises(FrameSequenceError, match='mixed resolutions'):
        load_sequence(tmp_path)


@pytest.mark.parametrize('k', [0, 1, 2])
def test_pad_boundary_frames(k):
    seq = FrameSequence(quantized_frames(3))
    padded = pad_boundary_frames(seq, k)
    assert len(padded) == 3 + 2 * k
    for i in range(k):
        np.testing.assert_array_equal(padded.data[i], seq.data[0])
        np.testing.assert_array_equal(padded.data[-1 - i], seq.data[-1])
    np.testing.assert_array_equal(padded.data[k:k + 3], seq.data)


def test_pad_rejects_negative_k():
    with pytest.raises(FrameSequenceError):
        pad_boundary_frames(FrameSequence(quantized_frames(2)), -1)


def test_to_uint8_rounds_and_clips():
    assert to_uint8(np.array([0.0, 0.5, 1.0, 1.2])).tolist() == [0, 128, 255, 255]
