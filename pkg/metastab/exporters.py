"""
Exporters
=========

Writes and reads the small interchange files around a run: evaluation
reports, ground-truth transform sidecars, shake profiles, JSON-lines loss
logs and MSFL flow dumps.
"""

import json
import struct
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from metastab.errors import CheckpointFormatError, ShapeError
from metastab.transforms import RigidTransform

FLOW_MAGIC = b"MSFL"
PathLike = Union[str, Path]


def clean_record(record: Dict[str, Any]) -> Dict[str, Any]:
    """
    JSON-safe copy of a record

    numpy scalars/arrays become Python values, tuples become lists and
    non-finite floats become None.
    """
    def convert(value):
        if isinstance(value, dict):
            return {str(k): convert(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        if isinstance(value, np.ndarray):
            return convert(value.tolist())
        if isinstance(value, np.generic):
            value = value.item()
        if isinstance(value, float) and not np.isfinite(value):
            return None
        if isinstance(value, Path):
            return str(value)
        return value

    return convert(record)


# ============================================================================
# REPORTS
# ============================================================================

def export_report_json(report, path: PathLike) -> Path:
    """Evaluation report as {stability, cropping, distortion, per_frame, ...}"""
    data = report.to_dict() if hasattr(report, 'to_dict') else dict(report)
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(clean_record(data), indent=2))
    return file_path


def summarize_report(report) -> List[Dict[str, Any]]:
    """
    One row per score with a status marker for terminal display

    ✅ ≥ 0.9, ⚠️ ≥ 0.7, ❌ below
    """
    data = report.to_dict() if hasattr(report, 'to_dict') else dict(report)
    rows = []
    for metric in ('stability', 'cropping', 'distortion'):
        value = float(data[metric])
        if value >= 0.9:
            status = "✅"
        elif value >= 0.7:
            status = "⚠️"
        else:
            status = "❌"
        rows.append({'metric': metric, 'value': value, 'status': status})
    return rows


# ============================================================================
# TRANSFORM SIDECARS / SHAKE PROFILES
# ============================================================================

def export_transforms(
    path: PathLike,
    jitter: Sequence[RigidTransform],
    smooth_path: Optional[Sequence[RigidTransform]] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Per-frame ground-truth transforms as sidecar JSON"""
    frames = []
    for t, transform in enumerate(jitter):
        entry = {'frame': t, 'jitter': transform.as_dict()}
        if smooth_path is not None:
            entry['smooth'] = smooth_path[t].as_dict()
        frames.append(entry)
    data = {'frames': frames, 'metadata': metadata or {}}
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(clean_record(data), indent=2))
    return file_path


def load_transforms(path: PathLike) -> Dict[str, List[RigidTransform]]:
    data = json.loads(Path(path).read_text())
    frames = sorted(data['frames'], key=lambda f: f['frame'])
    result = {'jitter': [RigidTransform.from_dict(f['jitter']) for f in frames]}
    if frames and 'smooth' in frames[0]:
        result['smooth'] = [RigidTransform.from_dict(f['smooth']) for f in frames]
    return result


def export_profile(profile, path: PathLike) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(profile.to_json())
    return file_path


def load_profile(path: PathLike):
    from metastab.synthetic import ShakeProfile

    return ShakeProfile.from_dict(json.loads(Path(path).read_text()))


# ============================================================================
# JSON LINES
# ============================================================================

class JsonLinesLog:
    """Append-only JSON-lines writer; every record gets a wall-clock 'time'"""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'a', encoding='utf-8')

    def write(self, record: Dict[str, Any]):
        line = clean_record({**record, 'time': time.time()})
        self._file.write(json.dumps(line, sort_keys=True) + '\n')
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> 'JsonLinesLog':
        return self

    def __exit__(self, *exc):
        self.close()


def read_json_lines(path: PathLike) -> List[Dict[str, Any]]:
    with open(path, encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


# ============================================================================
# MSFL FLOW DUMPS
# ============================================================================

def flow_to_bytes(u: np.ndarray, v: np.ndarray) -> bytes:
    """"MSFL" | width u32 | height u32 | row-major interleaved (u, v) f32"""
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeError(f"flow components must be equal 2-D arrays, got {u.shape} and {v.shape}")
    h, w = u.shape
    payload = np.stack([u, v], axis=-1).astype('<f4').tobytes()
    return FLOW_MAGIC + struct.pack('<II', w, h) + payload


def flow_from_bytes(data: bytes):
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise CheckpointFormatError("not an MSFL flow dump (bad magic)")
    w, h = struct.unpack_from('<II', data, 4)
    expected = 12 + w * h * 2 * 4
    if len(data) != expected:
        raise CheckpointFormatError(f"MSFL size {len(data)} does not match {w}×{h} flow ({expected} bytes)")
    values = np.frombuffer(data, dtype='<f4', offset=12).reshape(h, w, 2)
    return values[..., 0].copy(), values[..., 1].copy()


def write_flow(path: PathLike, flow) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_bytes(flow_to_bytes(flow.u, flow.v))
    return file_path


def read_flow(path: PathLike):
    """FlowField with unit confidence"""
    from metastab.flow import FlowField

    u, v = flow_from_bytes(Path(path).read_bytes())
    return FlowField(u, v, np.ones_like(u))
