"""Tensor-archive checkpoints.

Layout::

    bytes 0..8      little-endian uint64 N, the header length
    bytes 8..8+N    UTF-8 JSON: name -> {"dtype": "F32", "shape": [...],
                                         "data_offsets": [begin, end]}
                    plus an optional "__metadata__" object of string pairs
    bytes 8+N..     tensor payloads, little-endian float32, row-major

Offsets are relative to the first byte after the header. Payloads must be
non-overlapping and tile the data section in offset order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig

DTYPES = {"F32": np.dtype("<f4")}
METADATA_KEY = "__metadata__"
# refuse headers larger than this to avoid reading garbage as JSON
MAX_HEADER = 100 * 1024 * 1024


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], path: str | os.PathLike, metadata: dict[str, str] | None = None) -> None:
    header: dict[str, object] = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=DTYPES["F32"])
        raw = arr.tobytes(order="C")
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def read_header(path: str | os.PathLike) -> tuple[dict, dict[str, str], int]:
    """Parse and validate the header without touching payloads.

    Returns ``(entries, metadata, data_start)``.
    """
    size = Path(path).stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise CheckpointError("file too short for header length")
        (n,) = struct.unpack("<Q", head)
        if n > MAX_HEADER or 8 + n > size:
            raise CheckpointError(f"header length {n} exceeds file size {size}")
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("header must be a JSON object")
    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise CheckpointError("__metadata__ must map strings to strings")

    data_len = size - 8 - n
    spans = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointError(f"malformed entry for {name!r}")
        if entry["dtype"] not in DTYPES:
            raise CheckpointError(f"unknown dtype {entry['dtype']!r} for {name!r}")
        shape, offsets = entry["shape"], entry["data_offsets"]
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise CheckpointError(f"bad shape {shape!r} for {name!r}")
        if len(offsets) != 2 or not all(isinstance(o, int) for o in offsets):
            raise CheckpointError(f"bad data_offsets {offsets!r} for {name!r}")
        begin, end = offsets
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[entry["dtype"]].itemsize
        if not 0 <= begin <= end or end - begin != expected:
            raise CheckpointError(f"offsets {offsets} do not match shape {shape} for {name!r}")
        if end > data_len:
            raise CheckpointError(f"tensor {name!r} runs past end of file (truncated?)")
        spans.append((begin, end, name))
    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise CheckpointError(f"tensor {name!r} overlaps the previous tensor")
        if begin > cursor:
            raise CheckpointError(f"gap before tensor {name!r}")
        cursor = end
    if cursor != data_len:
        raise CheckpointError(f"data section is {data_len} bytes, tensors cover {cursor}")
    return header, metadata, 8 + n


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    entries, metadata, start = read_header(path)
    out = {}
    with open(path, "rb") as fh:
        for name, entry in entries.items():
            begin, end = entry["data_offsets"]
            fh.seek(start + begin)
            raw = fh.read(end - begin)
            arr = np.frombuffer(raw, dtype=DTYPES[entry["dtype"]]).reshape(tuple(entry["shape"]))
            out[name] = arr.astype(np.float32)
    return out, metadata


def save_model(model: Model, path: str | os.PathLike) -> None:
    save_tensors(model.tensors(), path, model.config.to_strings())


def load_model(path: str | os.PathLike) -> Model:
    tensors, metadata = load_tensors(path)
    if not metadata:
        raise CheckpointError("checkpoint carries no model config in __metadata__")
    try:
        config = ModelConfig.from_strings(metadata)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from None
    try:
        return Model.from_tensors(config, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
