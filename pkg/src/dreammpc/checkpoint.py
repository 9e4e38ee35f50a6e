"""Binary checkpoint format for collections of MLPs.

Layout, all integers and floats little-endian::

    magic        4 bytes  b"DMPC"
    version      u32      (currently 1)
    meta_len     u32
    meta         meta_len bytes, UTF-8 JSON (sorted keys)
    n_nets       u32
    per net:
        name_len u16, name (UTF-8)
        n_layers u32
        per layer: out u32, in u32, activation u8 (0 none, 1 tanh, 2 elu)
        per layer: weight out*in f64 (row-major), bias out f64
    n_arrays     u32
    per array:
        name_len u16, name (UTF-8), length u32, payload length*f64

A JSON sidecar (same stem, ``.json``) carries the meta block plus the
hyperparameters in human-readable form; it is informational and never read
back when loading weights.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensornet import Layer, MlpParams

MAGIC = b"DMPC"
VERSION = 1
_ACT_CODES = {None: 0, "tanh": 1, "elu": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    nets: dict[str, MlpParams]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out += [struct.pack("<I", len(meta)), meta]
    out.append(struct.pack("<I", len(ckpt.nets)))
    for name, net in ckpt.nets.items():
        out.append(_pack_name(name))
        out.append(struct.pack("<I", len(net.layers)))
        acts = list(net.activations) + [None]
        for layer, act in zip(net.layers, acts):
            o, i = layer.weight.shape
            out.append(struct.pack("<IIB", o, i, _ACT_CODES[act]))
        for layer in net.layers:
            out.append(np.ascontiguousarray(layer.weight, dtype=_F64).tobytes())
            out.append(np.ascontiguousarray(layer.bias, dtype=_F64).tobytes())
    out.append(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        flat = np.ascontiguousarray(np.ravel(arr), dtype=_F64)
        out += [_pack_name(name), struct.pack("<I", flat.size), flat.tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64)


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    nets = {}
    (n_nets,) = r.unpack("<I")
    for _ in range(n_nets):
        name = r.name()
        (n_layers,) = r.unpack("<I")
        dims = [r.unpack("<IIB") for _ in range(n_layers)]
        layers = []
        for o, i, _ in dims:
            w = r.floats(o * i).reshape(o, i)
            b = r.floats(o)
            layers.append(Layer(w, b))
        acts = [_ACT_NAMES[code] for _, _, code in dims[:-1]]
        nets[name] = MlpParams(layers, acts)
    arrays = {}
    (n_arrays,) = r.unpack("<I")
    for _ in range(n_arrays):
        name = r.name()
        (length,) = r.unpack("<I")
        arrays[name] = r.floats(length)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(nets, arrays, meta)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save(path, ckpt: Checkpoint, hyperparams: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    sidecar = {
        "schema": "checkpoint/1",
        "format": "dmpc-checkpoint",
        "version": VERSION,
        "meta": ckpt.meta,
        "hyperparams": hyperparams or {},
        "nets": {name: {"sizes": net.sizes, "activations": net.activations} for name, net in ckpt.nets.items()},
        "arrays": {name: int(np.size(a)) for name, a in ckpt.arrays.items()},
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
