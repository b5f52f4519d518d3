"""Checkpoint container and its binary format (magic "LSCK").

Layout, all little-endian, in this order: magic, u32 version, length-prefixed
JSON header (architecture plus whatever the trainer wants to persist, keys
sorted), named parameter records, optional Adam state aligned to the parameter
order, RNG state (key, counter), then named state arrays (batch-norm running
stats and feature normalization vectors).

The format is deterministic: saving what load() returned yields identical
bytes, and two runs that reach the same state write the same file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import ModelConfig, build_model
from .nn.adam import Adam
from .rng import Rng

MAGIC = b"LSCK"
VERSION = 1
_DT = {"f32": "<f4", "f64": "<f8"}


@dataclass
class Checkpoint:
    header: dict
    params: list = field(default_factory=list)   # [(name, ndarray)], ordered
    stats: list = field(default_factory=list)    # [(name, ndarray)], ordered
    adam: tuple | None = None                    # (t, {name: m}, {name: v})
    rng_state: tuple = (0, 0)

    @property
    def arch(self) -> ModelConfig:
        return ModelConfig.from_header(self.header["arch"])


def _write_record(f, name: str, arr: np.ndarray, dt: str) -> None:
    data = np.ascontiguousarray(arr, dtype=dt)
    raw_name = name.encode()
    f.write(struct.pack("<I", len(raw_name)))
    f.write(raw_name)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def _read_record(f, dt: str):
    (name_len,) = struct.unpack("<I", f.read(4))
    name = f.read(name_len).decode()
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    itemsize = 4 if dt == "<f4" else 8
    count = int(np.prod(shape)) if ndim else 1
    raw = f.read(itemsize * count)
    if len(raw) != itemsize * count:
        raise DataError("truncated checkpoint record")
    return name, np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    dt = _DT[ckpt.header["arch"]["dtype"]]
    head = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params:
            _write_record(f, name, arr, dt)
        if ckpt.adam is None:
            f.write(b"\x00")
        else:
            t, m, v = ckpt.adam
            f.write(b"\x01")
            f.write(struct.pack("<Q", t))
            for name, _ in ckpt.params:
                f.write(np.ascontiguousarray(m[name], dtype=dt).tobytes())
                f.write(np.ascontiguousarray(v[name], dtype=dt).tobytes())
        f.write(struct.pack("<QQ", ckpt.rng_state[0], ckpt.rng_state[1]))
        f.write(struct.pack("<I", len(ckpt.stats)))
        for name, arr in ckpt.stats:
            _write_record(f, name, arr, dt)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (head_len,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(head_len).decode())
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise DataError(f"{path}: corrupt checkpoint header") from e
        if "arch" not in header or "dtype" not in header.get("arch", {}):
            raise DataError(f"{path}: checkpoint header missing architecture")
        dt = _DT[header["arch"]["dtype"]]
        (n_params,) = struct.unpack("<I", f.read(4))
        params = [_read_record(f, dt) for _ in range(n_params)]
        ckpt = Checkpoint(header, params)
        (flag,) = struct.unpack("<B", f.read(1))
        if flag:
            (t,) = struct.unpack("<Q", f.read(8))
            m, v = {}, {}
            itemsize = 4 if dt == "<f4" else 8
            for name, arr in params:
                m[name] = np.frombuffer(f.read(itemsize * arr.size), dtype=dt).reshape(arr.shape).copy()
                v[name] = np.frombuffer(f.read(itemsize * arr.size), dtype=dt).reshape(arr.shape).copy()
            ckpt.adam = (t, m, v)
        key, counter = struct.unpack("<QQ", f.read(16))
        ckpt.rng_state = (key, counter)
        (n_stats,) = struct.unpack("<I", f.read(4))
        ckpt.stats = [_read_record(f, dt) for _ in range(n_stats)]
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return ckpt


def checkpoint_from_model(model, adam: Adam | None = None, rng: Rng | None = None,
                          extra: dict | None = None) -> Checkpoint:
    header = {"format": "segvae-checkpoint", "arch": model.cfg.to_header()}
    if extra:
        header.update(extra)
    params = [(name, p.data.copy()) for name, p in model.params()]
    stats = [(name, arr.copy()) for name, arr in model.stats()]
    ckpt = Checkpoint(header, params, stats)
    if adam is not None:
        t, m, v = adam.state()
        ckpt.adam = (t, {k: a.copy() for k, a in m.items()}, {k: a.copy() for k, a in v.items()})
    if rng is not None:
        ckpt.rng_state = rng.state
    return ckpt


def restore_model(ckpt: Checkpoint):
    """Rebuild a VAE or AE and load its arrays; probes live in probe.py."""
    kind = ckpt.header.get("arch", {}).get("kind")
    if kind not in ("vae", "ae"):
        raise DataError(f"checkpoint holds a {kind!r} model, not a vae/ae")
    model = build_model(ckpt.arch)
    model.load_arrays(dict(ckpt.params), dict(ckpt.stats))
    return model


def restore_adam(ckpt: Checkpoint, model, **adam_kwargs) -> Adam:
    adam = Adam(model.params(), **adam_kwargs)
    if ckpt.adam is not None:
        t, m, v = ckpt.adam
        adam.load_state(t, m, v)
    return adam
