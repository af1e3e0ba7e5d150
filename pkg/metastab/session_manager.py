"""
Session Management - Checkpoints and Run Manifests
==================================================

This module handles everything a run leaves on disk:
- MSTB parameter files (synthesis net θ, regressor φ, feature extractor)
- Periodic training checkpoints with rotation
- Run manifests (settings snapshot, seed, content hash of inputs)

MSTB layout (little-endian):
    b"MSTB" | version u32 | entry count u32 |
    per entry: name length u32 | UTF-8 name | dtype code u8 (4 = f32, 8 = f64) |
               rank u32 | dims u32 × rank | payload
"""

import hashlib
import json
import logging
import re
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import numpy as np

from metastab.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"MSTB"
FORMAT_VERSION = 1
DTYPE_CODES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}
CHECKPOINT_PATTERN = re.compile(r'^checkpoint_step(\d+)\.mstb$')
MANIFEST_VERSION = '1.0'

PathLike = Union[str, Path]


# ============================================================================
# MSTB PARAMETER FILES
# ============================================================================

def _as_arrays(params) -> Dict[str, np.ndarray]:
    if hasattr(params, 'to_arrays'):
        return params.to_arrays()
    return {name: np.asarray(arr) for name, arr in params.items()}


def serialize_parameters(params) -> bytes:
    """
    Encode named arrays (a mapping or ParamVector) as MSTB bytes

    Entries keep insertion order; payloads keep their own 32/64-bit width.
    """
    arrays = _as_arrays(params)
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        encoded = name.encode('utf-8')
        code = arr.dtype.itemsize
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BI', code, arr.ndim))
        chunks.append(struct.pack(f'<{arr.ndim}I', *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b''.join(chunks)


def deserialize_parameters(data: bytes) -> Dict[str, np.ndarray]:
    """Decode MSTB bytes; raises CheckpointFormatError on any inconsistency"""
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointFormatError("not an MSTB file (bad magic)")
    version, count = struct.unpack_from('<II', data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported MSTB version {version}")
    offset = 12
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode('utf-8')
            offset += name_len
            code, rank = struct.unpack_from('<BI', data, offset)
            offset += 5
            if code not in DTYPE_CODES:
                raise CheckpointFormatError(f"entry '{name}': unknown dtype code {code}")
            dims = struct.unpack_from(f'<{rank}I', data, offset)
            offset += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * code
            if offset + nbytes > len(data):
                raise CheckpointFormatError(f"entry '{name}': payload truncated")
            arrays[name] = np.frombuffer(data, dtype=DTYPE_CODES[code], count=nbytes // code, offset=offset).reshape(dims).copy()
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"corrupt MSTB table: {e}") from e
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes after MSTB table")
    return arrays


def save_parameters(params, path: PathLike) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_bytes(serialize_parameters(params))
    logger.debug("Saved %s", file_path)
    return file_path


def load_parameters(path: PathLike) -> Dict[str, np.ndarray]:
    return deserialize_parameters(Path(path).read_bytes())


def split_parameters(arrays: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Entries under 'prefix.' with the prefix removed"""
    head = f'{prefix}.'
    return {name[len(head):]: arr for name, arr in arrays.items() if name.startswith(head)}


def merge_parameters(**groups: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Prefix each group's names with its keyword, e.g. merge_parameters(net=..., regressor=...)"""
    merged: Dict[str, np.ndarray] = {}
    for prefix, arrays in groups.items():
        for name, arr in _as_arrays(arrays).items():
            merged[f'{prefix}.{name}'] = arr
    return merged


# ============================================================================
# CONTENT HASHES + MANIFESTS
# ============================================================================

def blob_hash(data: bytes) -> str:
    """git-style blob SHA-1: sha1(b"blob <size>\\0" + data)"""
    digest = hashlib.sha1()
    digest.update(f'blob {len(data)}\0'.encode('ascii'))
    digest.update(data)
    return digest.hexdigest()


def _input_files(paths: Iterable[PathLike]) -> List[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(f for f in p.rglob('*') if f.is_file() and not f.name.endswith('manifest.json')))
        elif p.exists():
            files.append(p)
    return files


def content_hash(paths: Iterable[PathLike]) -> Dict[str, Any]:
    """
    Per-file blob hashes of every input (directories recursed) and a combined
    hash over 'path hash' lines in sorted path order
    """
    entries = {str(f): blob_hash(f.read_bytes()) for f in _input_files(paths)}
    combined = blob_hash(''.join(f'{p} {h}\n' for p, h in sorted(entries.items())).encode('utf-8'))
    return {'combined': combined, 'files': entries}


def save_manifest(
    path: PathLike,
    subcommand: str,
    settings: Mapping[str, Any],
    seed: int,
    inputs: Iterable[PathLike] = (),
    outputs: Iterable[PathLike] = (),
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write a run manifest next to the run's outputs

    Args:
        path: Manifest JSON file
        subcommand: CLI subcommand that ran
        settings: Settings snapshot
        seed: Global seed
        inputs: Input files/directories to hash
        outputs: Output files/directories to hash
        extra: Additional subcommand-specific fields
    """
    from metastab import __version__

    manifest = {
        'version': MANIFEST_VERSION,
        'package_version': __version__,
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'subcommand': subcommand,
        'seed': seed,
        'settings': settings,
        'inputs': content_hash(inputs),
        'outputs': content_hash(outputs),
    }
    if extra:
        manifest['extra'] = dict(extra)
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return file_path


def _json_default(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, (np.ndarray, tuple, set)):
        return list(value.tolist() if isinstance(value, np.ndarray) else value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def validate_manifest(manifest: Mapping[str, Any]) -> bool:
    """Check required manifest fields"""
    required = ['version', 'subcommand', 'seed', 'settings', 'inputs']
    missing = [key for key in required if key not in manifest]
    if missing:
        logger.warning("Manifest missing fields: %s", missing)
        return False
    return True


# ============================================================================
# CHECKPOINT ROTATION
# ============================================================================

def checkpoint_path(directory: PathLike, step: int) -> Path:
    return Path(directory) / f'checkpoint_step{step:06d}.mstb'


def auto_save_checkpoint(params, directory: PathLike, step: int, keep_last: int = 5) -> Path:
    """Save a training checkpoint and drop all but the newest keep_last"""
    save_dir = Path(directory)
    save_dir.mkdir(parents=True, exist_ok=True)
    path = save_parameters(params, checkpoint_path(save_dir, step))
    cleanup_old_checkpoints(save_dir, keep_last=keep_last)
    logger.info("Checkpoint saved at step %d: %s", step, path)
    return path


def _checkpoint_files(save_dir: Path) -> List[tuple]:
    found = []
    for file_path in save_dir.glob('checkpoint_step*.mstb'):
        match = CHECKPOINT_PATTERN.match(file_path.name)
        if match:
            found.append((int(match.group(1)), file_path))
    return sorted(found, reverse=True)


def cleanup_old_checkpoints(save_dir: PathLike, keep_last: int = 5):
    """Remove old checkpoints, keeping the highest steps"""
    if keep_last <= 0:
        return
    for _, file_path in _checkpoint_files(Path(save_dir))[keep_last:]:
        try:
            file_path.unlink()
        except OSError as e:
            logger.warning("Could not remove old checkpoint %s: %s", file_path, e)


def list_saved_checkpoints(save_dir: PathLike) -> List[Dict[str, Any]]:
    """Checkpoints with step, size, content hash and parameter count, newest first"""
    save_path = Path(save_dir)
    if not save_path.exists():
        return []
    checkpoints = []
    for step, file_path in _checkpoint_files(save_path):
        try:
            data = file_path.read_bytes()
            arrays = deserialize_parameters(data)
        except (OSError, CheckpointFormatError) as e:
            logger.warning("Could not read checkpoint %s: %s", file_path, e)
            continue
        checkpoints.append({
            'step': step,
            'filename': file_path.name,
            'path': str(file_path),
            'size': len(data),
            'hash': blob_hash(data),
            'parameters': int(sum(a.size for a in arrays.values())),
        })
    return checkpoints


def latest_checkpoint(save_dir: PathLike) -> Optional[Dict[str, Any]]:
    """Newest readable checkpoint entry (see list_saved_checkpoints), None when there is none"""
    checkpoints = list_saved_checkpoints(save_dir)
    return checkpoints[0] if checkpoints else None
