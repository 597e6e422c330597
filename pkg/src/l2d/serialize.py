"""Flat little-endian float32 tensor container with a JSON index.

``<name>.bin`` holds the raw parameter bytes back to back; ``<name>.json``
maps each parameter name to its shape and byte offset, plus any extra header
fields the caller stores (e.g. the model config).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "l2d-tensors"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A container file is corrupt or inconsistent with its index."""


def _index_path(path_bin: Path, path_json) -> Path:
    return Path(path_json) if path_json is not None else path_bin.with_suffix(".json")


def save_tensors(tensors: dict[str, np.ndarray], path_bin, path_json=None, header: dict | None = None) -> None:
    path_bin = Path(path_bin)
    index = {}
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        index[name] = {"shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    doc = {"format": FORMAT, "version": VERSION, "dtype": "<f4", "total_bytes": offset, "tensors": index}
    if header:
        doc.update(header)
    path_bin.write_bytes(b"".join(chunks))
    _index_path(path_bin, path_json).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_tensors(path_bin, path_json=None) -> tuple[dict[str, np.ndarray], dict]:
    path_bin = Path(path_bin)
    try:
        doc = json.loads(_index_path(path_bin, path_json).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint index is not valid JSON: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise FormatError(f"unexpected container format {doc.get('format')!r}")
    raw = path_bin.read_bytes()
    if len(raw) != doc["total_bytes"]:
        raise FormatError(f"payload is {len(raw)} bytes, index declares {doc['total_bytes']}")
    out = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(raw):
            raise FormatError(f"tensor {name!r} runs past end of payload at byte offset {start}")
        out[name] = np.frombuffer(raw, dtype=_LE_F32, count=count, offset=start).reshape(shape).astype(np.float32)
    return out, doc
