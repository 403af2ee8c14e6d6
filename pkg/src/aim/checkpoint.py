"""Binary checkpoint format for model parameters and optimizer state.

Layout (little-endian):
    magic "AIMC", u32 version,
    u32 meta_len, meta bytes (the resolved model-config text),
    u32 n_params,
    per parameter: u16 name_len, name utf8, u8 ndim, u32 dims..., f64 data,
    u8 has_opt; if set: u64 step, then per parameter (same order) the Adam
    first and second moment arrays as f64.

Float64 throughout, so save/load round trips are bit exact.
"""
from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .config import ModelConfig
from .model import ModelParams
from .numcore import Tensor

MAGIC = b"AIMC"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file does not match the documented schema."""


def _cfg_text(cfg: ModelConfig) -> str:
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)) + "\n"


def _cfg_from_text(text: str) -> ModelConfig:
    cfg = ModelConfig()
    for line in text.strip().splitlines():
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(cfg, key):
            raise CheckpointError(f"unknown model config key {key!r}")
        setattr(cfg, key, int(raw))
    return cfg


def _write_array(fh, arr: np.ndarray):
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", fh.read(1))
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    n = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(8 * n), "<f8").reshape(dims)
    return data.astype(np.float64)


def save_checkpoint(path: str, params: ModelParams, opt_state: dict | None = None):
    """opt_state, when given, holds {"step": int, "m": {...}, "v": {...}}."""
    names = sorted(params.tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        meta = _cfg_text(params.cfg).encode()
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            _write_array(fh, params[name].data)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", int(opt_state["step"])))
            for name in names:
                _write_array(fh, opt_state["m"][name])
                _write_array(fh, opt_state["v"][name])


def load_checkpoint(path: str):
    """Returns (ModelParams, opt_state or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        cfg = _cfg_from_text(fh.read(meta_len).decode())
        (n_params,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        names = []
        for _ in range(n_params):
            (nl,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nl).decode()
            names.append(name)
            tensors[name] = Tensor(_read_array(fh), requires_grad=True, name=name)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if has_opt:
            (step,) = struct.unpack("<Q", fh.read(8))
            opt_state = {"step": step, "m": {}, "v": {}}
            for name in names:
                opt_state["m"][name] = _read_array(fh)
                opt_state["v"][name] = _read_array(fh)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return ModelParams(cfg, tensors), opt_state
