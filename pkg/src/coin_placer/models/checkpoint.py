"""Binary checkpoints: fixed header, then little-endian float64 parameter blocks."""

from __future__ import annotations

import os
import struct

import numpy as np

from .gcn import PARAM_ORDER as GCN_ORDER
from .gcn import GcnParams
from .mlp import PARAM_ORDER as MLP_ORDER
from .mlp import MlpParams

__all__ = ["CheckpointError", "save_gcn", "load_gcn", "save_mlp", "load_mlp"]

GCN_MAGIC = b"CPGCN\x00\x00\x00"
MLP_MAGIC = b"CPMLP\x00\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")  # magic, version, F, width, classes


class CheckpointError(ValueError):
    pass


def _write(path, magic: bytes, dims: tuple[int, int, int], blocks) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(magic, VERSION, *dims))
        for arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read(path, magic: bytes, shapes_for):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError("file shorter than the header")
    got, version, f, w, c = _HEADER.unpack_from(raw)
    if got != magic:
        raise CheckpointError(f"bad magic {got!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    shapes = shapes_for(f, w, c)
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise CheckpointError(f"expected {need} bytes, found {len(raw)}")
    out, pos = [], _HEADER.size
    for s in shapes:
        count = int(np.prod(s))
        out.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(float).reshape(s))
        pos += 8 * count
    return out


def _gcn_shapes(f, d, c):
    return [(f, d), (d,), (d, d), (d, c), (c,)]


def save_gcn(path, p: GcnParams) -> None:
    _write(path, GCN_MAGIC, (p.n_features, p.delta, p.n_classes), [getattr(p, n) for n in GCN_ORDER])


def load_gcn(path) -> GcnParams:
    return GcnParams(*_read(path, GCN_MAGIC, _gcn_shapes))


def _mlp_shapes(f, h, c):
    return [(f, h), (h,), (h, h), (h,), (h, c), (c,)]


def save_mlp(path, p: MlpParams) -> None:
    _write(path, MLP_MAGIC, (p.n_features, p.W1.shape[1], p.n_classes), [getattr(p, n) for n in MLP_ORDER])


def load_mlp(path) -> MlpParams:
    return MlpParams(*_read(path, MLP_MAGIC, _mlp_shapes))
