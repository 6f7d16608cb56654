"""Single-file tensor container: JSON manifest followed by raw little-endian floats.

Layout::

    b"XECK" | u32 manifest length | manifest (UTF-8 JSON) | tensor bytes

The manifest records the format version, dtype, per-tensor name/shape/byte
offset (relative to the start of the tensor bytes), a SHA-256 of the tensor
bytes, and free-form metadata.  Model checkpoints store 32-bit floats; editor
caches store 64-bit floats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingArtifactError
from .model import ModelConfig, TinyViT, param_shapes

MAGIC = b"XECK"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_tensors(path, tensors: dict[str, np.ndarray], kind: str, meta: dict | None = None, dtype: str = "f4") -> None:
    dt = _DTYPES[dtype]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dtype": dtype,
        "tensors": entries,
        "checksum": "sha256:" + hashlib.sha256(data).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + data)


def load_tensors(path, kind: str | None = None):
    """Returns ``(tensors, manifest)``; validates magic, version, kind and checksum."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC or len(buf) < 8:
        raise FormatError(f"{path}: not a tensor container")
    (n,) = struct.unpack("<I", buf[4:8])
    try:
        manifest = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} container, found {manifest.get('kind')}")
    data = buf[8 + n :]
    if "sha256:" + hashlib.sha256(data).hexdigest() != manifest["checksum"]:
        raise FormatError(f"{path}: checksum mismatch")
    dt = _DTYPES[manifest["dtype"]]
    tensors = {}
    for e in manifest["tensors"]:
        chunk = data[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).copy()
    return tensors, manifest


def save_model(path, model: TinyViT, meta: dict | None = None) -> None:
    info = {"config": model.config.to_dict(), **(meta or {})}
    save_tensors(path, model.params, kind="model", meta=info, dtype="f4")


def load_model(path) -> tuple[TinyViT, dict]:
    tensors, manifest = load_tensors(path, kind="model")
    config = ModelConfig(**manifest["meta"]["config"])
    shapes = param_shapes(config)
    if set(shapes) != set(tensors):
        raise FormatError(f"{path}: tensor names do not match the model config")
    params = {}
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors[name].astype(np.float32)
    return TinyViT(config, params), manifest["meta"]
