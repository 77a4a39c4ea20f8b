"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"ERICCKPT"
    version u32
    n_meta  u32, then n_meta x (key: str, value: str)   # values are JSON
    n_tens  u32, then n_tens x (name: str, dtype: str, ndim: u32, shape: ndim x u64, payload)

Strings are a u32 byte length followed by UTF-8 bytes. Payloads are raw
little-endian float64. The model config is stored under meta key
``"config.<field>"``; loading against a different config fails loudly.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import EricModel, ModelConfig

MAGIC = b"ERICCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _wstr(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _rstr(f) -> str:
    (n,) = struct.unpack("<I", _read(f, 4))
    return _read(f, n).decode("utf-8")


def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def write_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta)))
        for k in sorted(meta):
            _wstr(f, k)
            _wstr(f, json.dumps(meta[k], sort_keys=True))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            _wstr(f, name)
            _wstr(f, "f64")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_meta,) = struct.unpack("<I", _read(f, 4))
        meta = {}
        for _ in range(n_meta):
            k = _rstr(f)
            meta[k] = json.loads(_rstr(f))
        (n_tens,) = struct.unpack("<I", _read(f, 4))
        tensors = {}
        for _ in range(n_tens):
            name = _rstr(f)
            dtype = _rstr(f)
            if dtype != "f64":
                raise CheckpointError(f"unsupported dtype {dtype!r} for {name}")
            (ndim,) = struct.unpack("<I", _read(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(_read(f, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return meta, tensors


def config_meta(config: ModelConfig) -> dict:
    return {f"config.{k}": v for k, v in config.to_dict().items()}


def config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig.from_dict({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})


def save_model(path: str | Path, model: EricModel, extra_meta: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    meta = config_meta(model.config)
    meta.update(extra_meta or {})
    tensors = {f"param.{k}": t.data for k, t in model.params.items()}
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_model(path: str | Path, expected: ModelConfig | None = None):
    """Returns (model, meta, extra tensors). Raises on config mismatch with ``expected``."""
    meta, tensors = read_checkpoint(path)
    config = config_from_meta(meta)
    if expected is not None and expected.to_dict() != config.to_dict():
        diff = {k: (v, config.to_dict()[k]) for k, v in expected.to_dict().items() if config.to_dict()[k] != v}
        raise CheckpointError(f"checkpoint config mismatch (expected, found): {diff}")
    params = {k[len("param."):]: Tensor(v, requires_grad=True, name=k[len("param."):])
              for k, v in tensors.items() if k.startswith("param.")}
    fresh = EricModel(config, seed=0)
    if set(params) != set(fresh.params):
        raise CheckpointError("checkpoint parameters do not match the model architecture")
    for k, t in params.items():
        if t.shape != fresh.params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}: {t.shape} vs {fresh.params[k].shape}")
    extra = {k: v for k, v in tensors.items() if not k.startswith("param.")}
    # keep the constructor's order: the optimizer's norm sums run in dict order
    params = {k: params[k] for k in fresh.params}
    return EricModel(config, params=params), meta, extra
