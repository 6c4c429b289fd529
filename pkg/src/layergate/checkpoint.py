"""Versioned checkpoint container with deterministic bytes.

Layout: magic ``MIRC``, version u8, u32 little-endian JSON index length, the
JSON index (sorted keys: metadata dict plus a tensor table of name / dtype /
shape / byte offset), then the raw little-endian C-order tensor payloads in
table order.  Identical inputs produce identical files, which zip- or
pickle-based containers do not guarantee.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .encoder import EncodingNetwork, ModelSpec
from .features import BadMagicError, TruncatedPayloadError, VersionMismatchError

__all__ = ["save_arrays", "load_arrays", "save_model", "load_model"]

_MAGIC = b"MIRC"
_VERSION = 1
_PREFIX = struct.Struct("<4sBI")  # magic, version, index length

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8"}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named arrays plus a JSON-safe metadata dict."""
    path = Path(path)
    table = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        # np.ascontiguousarray would silently promote 0-d arrays to shape (1,),
        # so rely on astype/tobytes below for layout normalization instead.
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype).tobytes(order="C")
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    index = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, _VERSION, len(index)))
        fh.write(index)
        for raw in payloads:
            fh.write(raw)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < _PREFIX.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, index_len = _PREFIX.unpack_from(raw)
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    index_end = _PREFIX.size + index_len
    if len(raw) < index_end:
        raise TruncatedPayloadError(f"{path}: index truncated")
    index = json.loads(raw[_PREFIX.size:index_end].decode("utf-8"))
    body = raw[index_end:]
    arrays = {}
    for entry in index["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(body):
            raise TruncatedPayloadError(f"{path}: tensor {entry['name']!r} payload truncated")
        arrays[entry["name"]] = (
            np.frombuffer(body[start:stop], dtype=dtype).reshape(entry["shape"]).copy()
        )
    return arrays, index["meta"]


def save_model(path, model: EncodingNetwork, extra_meta: dict | None = None) -> Path:
    """Checkpoint a network: every state-dict tensor plus its rebuild spec."""
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    meta = {"model_spec": model.spec.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    return save_arrays(path, arrays, meta)


def load_model(path) -> tuple[EncodingNetwork, dict]:
    arrays, meta = load_arrays(path)
    spec = ModelSpec.from_dict(meta["model_spec"])
    model = EncodingNetwork(spec)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
