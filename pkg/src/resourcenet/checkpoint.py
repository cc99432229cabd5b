"""Versioned checkpoint container for parameters and metadata.

Binary layout (little-endian)::

    b"RNETCKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 count
    count x [ u16 name_len  name  u8 ndim  ndim x u32 dim  float64 values ]

Values are row-major. The JSON variant stores the same content as text and
converts to and from the binary form without loss.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .features import Normalizer

MAGIC = b"RNETCKPT"
VERSION = 1
JSON_FORMAT = "resourcenet-checkpoint"


class CheckpointError(ValueError):
    pass


def to_bytes(params: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name} has non-finite values")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def from_bytes(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        pos = len(MAGIC)
        version, meta_len = struct.unpack_from("<II", blob, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += 8
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params, meta


def to_json(params: Dict[str, np.ndarray], meta: Optional[dict] = None) -> str:
    doc = {
        "format": JSON_FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "values": [float(x) for x in np.ravel(v)]}
                   for k, v in params.items()},
    }
    # parameter order is part of the binary layout, so keys stay unsorted
    return json.dumps(doc)


def from_json(text: str) -> Tuple[Dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("format") != JSON_FORMAT:
        raise CheckpointError("not a JSON checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    try:
        params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"malformed parameter table ({exc})") from None
    return params, doc.get("meta", {})


def save(path, params: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write binary, or JSON text when ``path`` ends in ``.json``."""
    if str(path).endswith(".json"):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(to_json(params, meta))
    else:
        with open(path, "wb") as fh:
            fh.write(to_bytes(params, meta))


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob.startswith(MAGIC):
        return from_bytes(blob)
    try:
        return from_json(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None


def save_model(path, model, normalizer: Optional[Normalizer] = None, extra: Optional[dict] = None) -> None:
    meta = {"kind": "resourcenet", "config": model.config.to_dict(), "seed": model.config.seed}
    if normalizer is not None:
        meta["normalizer"] = normalizer.to_dict()
    meta.update(extra or {})
    save(path, model.params.values, meta)


def load_model(path):
    """Returns (ResourceNet, Normalizer or None, meta)."""
    from .model import ModelConfig, ResourceNet
    from .numerics import ParamStore

    params, meta = load(path)
    if meta.get("kind") != "resourcenet":
        raise CheckpointError(f"{path} does not hold a ResourceNet")
    store = ParamStore()
    for k, v in params.items():
        store.add(k, v)
    model = ResourceNet(ModelConfig.from_dict(meta["config"]), store)
    norm = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else None
    return model, norm, meta


def save_elementwise(path, model, normalizer: Optional[Normalizer] = None) -> None:
    meta = {"kind": f"elementwise:{model.kind}"}
    if normalizer is not None:
        meta["normalizer"] = normalizer.to_dict()
    save(path, model.weights, meta)


def load_elementwise(path):
    from .baselines import ElementwiseModel

    params, meta = load(path)
    kind = meta.get("kind", "")
    if not kind.startswith("elementwise:"):
        raise CheckpointError(f"{path} does not hold an elementwise model")
    return ElementwiseModel(kind.split(":", 1)[1], params)
