"""Versioned binary checkpoint container: magic string, format version, named arrays.

Arrays are stored C-ordered in sorted name order with a JSON metadata block,
so identical inputs serialize to identical bytes and files round-trip exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ADVTXTGC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """Atomically write named arrays plus metadata to a container file."""
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        original = np.asarray(arrays[name])
        arr = np.ascontiguousarray(original)  # promotes 0-d to 1-d; keep the true shape
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<H", len(dtype_b)) + dtype_b
        blob += struct.pack("<B", original.ndim)
        blob += struct.pack(f"<{original.ndim}Q", *original.shape) if original.ndim else b""
        raw = arr.tobytes()
        blob += struct.pack("<Q", len(raw)) + raw
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    offset = 8
    (version,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    metadata = json.loads(bytes(view[offset : offset + meta_len]).decode("utf-8"))
    offset += meta_len
    (n_arrays,) = struct.unpack_from("<I", view, offset)
    offset += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (dtype_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        dtype = np.dtype(bytes(view[offset : offset + dtype_len]).decode("ascii"))
        offset += dtype_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, offset) if ndim else ()
        offset += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, offset)
        offset += 8
        arr = np.frombuffer(view[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
        arrays[name] = arr
    return arrays, metadata


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def arrays_to_state_dict(arrays: dict[str, np.ndarray]):
    import torch

    return {k: torch.from_numpy(v) for k, v in arrays.items()}


def check_vocab_hash(metadata: dict, vocab, path) -> None:
    stored = metadata.get("vocab_hash")
    if stored is not None and stored != vocab.content_hash():
        raise CheckpointError(f"{path}: checkpoint was trained against a different vocabulary")
