"""On-disk formats: JSON model config and the ``HYTS1`` weights container.

Weights layout::

    b"HYTS1"                      magic
    u64 little-endian             manifest length in bytes
    manifest                      UTF-8 JSON: {"tensors": [{name, shape, precision, offset, length}, ...]}
    zero padding                  up to the next 64-byte boundary (body start)
    body                          raw little-endian float32, each tensor at a
                                  64-byte aligned offset relative to body start
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, MagicError, ShapeError, TruncatedError
from .model import Model, ModelConfig, TINY, build_model

MAGIC = b"HYTS1"
ALIGN = 64

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


# -- config -------------------------------------------------------------------


def config_from_dict(doc: dict) -> ModelConfig:
    """Strict: unknown keys are rejected, missing keys come from the tiny preset."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    values = TINY.to_dict()
    for key, val in doc.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}", field=key)
        want = _FIELD_TYPES[key]
        ok = {
            "int": isinstance(val, int) and not isinstance(val, bool),
            "float": isinstance(val, (int, float)) and not isinstance(val, bool),
            "str": isinstance(val, str),
            "bool": isinstance(val, bool),
        }[want]
        if not ok:
            raise ConfigError(f"config key {key!r} must be {want}, got {val!r}", field=key)
        values[key] = float(val) if want == "float" else val
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}", field=str(path)) from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}", field=str(path)) from e
    return config_from_dict(doc)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# -- weights ------------------------------------------------------------------


def save_weights(model: Model, path) -> None:
    tensors = model.named_tensors()
    manifest, offset = [], 0
    for name, arr in tensors.items():
        length = int(arr.size) * 4
        manifest.append({"name": name, "shape": list(arr.shape), "precision": "f32", "offset": offset, "length": length})
        offset = _align(offset + length)
    header = json.dumps({"tensors": manifest}).encode("utf-8")
    prefix = MAGIC + struct.pack("<Q", len(header)) + header
    with open(path, "wb") as fh:
        fh.write(prefix + b"\0" * (_align(len(prefix)) - len(prefix)))
        pos = 0
        for entry, arr in zip(manifest, tensors.values()):
            fh.write(b"\0" * (entry["offset"] - pos))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            pos = entry["offset"] + entry["length"]


def read_weights(path) -> dict[str, np.ndarray]:
    """Parse and validate the container; returns tensors by name."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + 8:
        raise TruncatedError(f"{path}: file ends inside the header")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    hstart = len(MAGIC) + 8
    if len(raw) < hstart + hlen:
        raise TruncatedError(f"{path}: file ends inside the manifest")
    try:
        manifest = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ManifestError(f"{path}: unreadable manifest ({e})") from e
    body = raw[_align(hstart + hlen) :]
    out, end = {}, 0
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        off, length = entry["offset"], entry["length"]
        if name in out:
            raise ManifestError(f"{path}: duplicate tensor {name}")
        if off < end or off % ALIGN or entry.get("precision") != "f32":
            raise ManifestError(f"{path}: bad layout for tensor {name}")
        if length != int(np.prod(shape, dtype=np.int64)) * 4:
            raise ShapeError(f"{path}: tensor {name} length {length} does not match shape {shape}", tensor=name)
        if off + length > len(body):
            raise TruncatedError(f"{path}: body ends inside tensor {name}")
        out[name] = np.frombuffer(body, dtype="<f4", count=length // 4, offset=off).astype(np.float32).reshape(shape)
        end = off + length
    if end != len(body):
        raise TruncatedError(f"{path}: body is {len(body)} bytes, manifest ends at {end}")
    return out


def _set_named(model: Model, name: str, value: np.ndarray) -> None:
    parts = name.split(".")
    if parts[0] != "blocks":
        setattr(model, parts[0], value)
        return
    blk = model.blocks[int(parts[1])]
    if parts[2] == "norm":
        blk.norm = value
        return
    obj = blk.params
    for p in parts[3:-1]:
        obj = getattr(obj, p)
    setattr(obj, parts[-1], value)


def load_weights(path, cfg: ModelConfig) -> Model:
    """Load weights for ``cfg``. Every tensor is checked before the model is assembled."""
    tensors = read_weights(path)
    model = build_model(cfg)
    expected = model.named_tensors()
    for name, arr in expected.items():
        if name not in tensors:
            raise ShapeError(f"tensor {name} missing from {path}", tensor=name)
        if tensors[name].shape != arr.shape:
            raise ShapeError(f"tensor {name} has shape {tensors[name].shape}, config needs {arr.shape}", tensor=name)
    extra = set(tensors) - set(expected)
    if extra:
        name = sorted(extra)[0]
        raise ShapeError(f"tensor {name} in {path} is not part of this config", tensor=name)
    for name, arr in tensors.items():
        _set_named(model, name, arr)
    return model
