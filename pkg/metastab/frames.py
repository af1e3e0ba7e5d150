"""
Frames
======

Frame and FrameSequence types, PNG directory I/O and boundary padding.
Frames are float32 H×W×3 arrays in [0, 1].
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from metastab.errors import FrameSequenceError
from metastab.settings_manager import resolve_workers

logger = logging.getLogger(__name__)

MIN_SIZE = 32
ROLES = ('unstable', 'stable', 'synthesized', 'aligned')
FRAME_PATTERN = re.compile(r'^(\d+)\.(png|jpg|jpeg|bmp|tif|tiff)$', re.IGNORECASE)


@dataclass
class Frame:
    data: np.ndarray
    index: int = 0

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


class FrameSequence:
    """
    Ordered frames of one resolution, stored as an N×H×W×3 float32 stack

    Indices run consecutively from start_index. Sequences are treated as
    immutable once constructed.
    """

    def __init__(self, frames: Union[np.ndarray, Sequence[np.ndarray]], role: str = 'unstable', start_index: int = 0):
        if role not in ROLES:
            raise FrameSequenceError(f"Unknown sequence role '{role}'; expected one of {ROLES}")
        if not isinstance(frames, np.ndarray):
            if len(frames) == 0:
                raise FrameSequenceError("no frames")
            shapes = {f.shape for f in frames}
            if len(shapes) > 1:
                raise FrameSequenceError(f"mixed resolutions: {sorted(shapes)}")
            frames = np.stack(frames)
        data = np.asarray(frames, dtype=np.float32)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise FrameSequenceError(f"expected N×H×W×3 frames, got shape {data.shape}")
        if data.shape[0] == 0:
            raise FrameSequenceError("no frames")
        if data.shape[1] < MIN_SIZE or data.shape[2] < MIN_SIZE:
            raise FrameSequenceError(f"frames are {data.shape[2]}×{data.shape[1]}; both sides must be ≥ {MIN_SIZE}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise FrameSequenceError("frame values must lie in [0, 1]")
        self.data = data
        self.role = role
        self.start_index = start_index

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Frame:
        return Frame(self.data[i], self.start_index + (i % len(self)))

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self[i]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def with_role(self, role: str) -> 'FrameSequence':
        return FrameSequence(self.data, role=role, start_index=self.start_index)

    def slice(self, start: int, stop: int) -> 'FrameSequence':
        return FrameSequence(self.data[start:stop], role=self.role, start_index=self.start_index + start)

    def __repr__(self) -> str:
        return f"FrameSequence(role={self.role!r}, frames={len(self)}, size={self.width}×{self.height})"


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def _read_frame(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0


def load_sequence(directory: Union[str, Path], role: str = 'unstable', workers: Optional[int] = None) -> FrameSequence:
    """
    Load zero-padded numbered image files as a sequence

    Args:
        directory: Folder with files such as 000001.png, 000002.png, ...
        role: Role tag for the returned sequence
        workers: Decoder threads

    Returns:
        FrameSequence ordered by filename index
    """
    folder = Path(directory)
    if not folder.is_dir():
        raise FrameSequenceError(f"not a directory: {folder}")

    numbered = []
    for path in folder.iterdir():
        match = FRAME_PATTERN.match(path.name)
        if match:
            numbered.append((int(match.group(1)), path))
    if not numbered:
        raise FrameSequenceError(f"no frames in {folder}")
    numbered.sort()

    indices = [i for i, _ in numbered]
    if len(set(indices)) != len(indices):
        raise FrameSequenceError(f"duplicate frame index in {folder}")
    for previous, current in zip(indices, indices[1:]):
        if current != previous + 1:
            raise FrameSequenceError(f"gap at {previous + 1} in {folder}")

    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        frames = list(pool.map(_read_frame, [p for _, p in numbered]))

    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise FrameSequenceError(f"mixed resolutions in {folder}: {sorted(s[:2] for s in shapes)}")
    logger.debug("Loaded %d frames from %s", len(frames), folder)
    return FrameSequence(np.stack(frames), role=role, start_index=indices[0])


def save_sequence(seq: FrameSequence, directory: Union[str, Path], workers: Optional[int] = None) -> List[Path]:
    """Write frames as 8-bit PNGs named 000000.png, 000001.png, ..."""
    folder = Path(directory)
    folder.mkdir(parents=True, exist_ok=True)
    paths = [folder / f"{i:06d}.png" for i in range(len(seq))]

    def write(i: int):
        Image.fromarray(to_uint8(seq.data[i])).save(paths[i])

    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        list(pool.map(write, range(len(seq))))
    return paths


def pad_boundary_frames(seq: FrameSequence, k: int) -> FrameSequence:
    """Prepend k copies of the first frame and append k copies of the last"""
    if k < 0:
        raise FrameSequenceError(f"pad_boundary_frames: k must be ≥ 0, got {k}")
    if k == 0:
        return seq
    data = np.concatenate([np.repeat(seq.data[:1], k, axis=0), seq.data, np.repeat(seq.data[-1:], k, axis=0)])
    return FrameSequence(data, role=seq.role, start_index=seq.start_index - k)


def as_array(frame: Union[Frame, np.ndarray]) -> np.ndarray:
    return frame.data if isinstance(frame, Frame) else np.asarray(frame)
