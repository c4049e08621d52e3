"""Checkpoint file format.

    magic "CPVM" | u32 version | u8 mode | u32 dim | u64 init seed | u32 n_tensors
    per tensor: u8 ndim | ndim x u32 dims
    all tensor data, row-major float32 little-endian, declaration order
    u8 adam_flag; if 1: u64 t | f64 lr, beta1, beta2, eps | m tensors | v tensors

load(save(model)) restores parameters bitwise. Mode/dim/shape mismatches raise
CheckpointError rather than silently reshaping.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .model import CPVModel, Mode
from .nn import Adam

MAGIC = b"CPVM"
VERSION = 1
_MODE_ID = {Mode.CPV: 0, Mode.TE: 1, Mode.NAIVE: 2}
_ID_MODE = {v: k for k, v in _MODE_ID.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, model: CPVModel, adam: Adam | None = None) -> None:
    params = model.params()
    chunks = [
        MAGIC,
        struct.pack("<IBIQI", VERSION, _MODE_ID[model.mode], model.dim,
                    model.seed & 0xFFFFFFFFFFFFFFFF, len(params)),
    ]
    for p in params:
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
    for p in params:
        chunks.append(p.data.astype("<f4").tobytes())
    if adam is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<Qdddd", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for arrs in (adam.m, adam.v):
            for a in arrs:
                chunks.append(a.astype("<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str, expect_mode=None, expect_dim: int | None = None):
    """Rebuild (model, adam-or-None) from a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    header = "<IBIQI"
    version, mode_id, dim, seed, n_tensors = struct.unpack(header, take(struct.calcsize(header)))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if mode_id not in _ID_MODE:
        raise CheckpointError(f"{path}: unknown mode id {mode_id}")
    mode = _ID_MODE[mode_id]
    if expect_mode is not None and Mode(expect_mode) is not mode:
        raise CheckpointError(f"{path}: checkpoint mode {mode.value}, expected {Mode(expect_mode).value}")
    if expect_dim is not None and expect_dim != dim:
        raise CheckpointError(f"{path}: checkpoint dim {dim}, expected {expect_dim}")

    model = CPVModel(mode, dim, seed=seed)
    params = model.params()
    if n_tensors != len(params):
        raise CheckpointError(f"{path}: {n_tensors} tensors, model has {len(params)}")
    shapes = []
    for _ in range(n_tensors):
        (ndim,) = struct.unpack("<B", take(1))
        shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim)))
    for p, shape in zip(params, shapes):
        if tuple(p.data.shape) != shape:
            raise CheckpointError(f"{path}: tensor shape {shape} does not match model {p.data.shape}")
    for p, shape in zip(params, shapes):
        n = int(np.prod(shape)) if shape else 1
        p.data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    (adam_flag,) = struct.unpack("<B", take(1))
    adam = None
    if adam_flag == 1:
        t, lr, b1, b2, eps = struct.unpack("<Qdddd", take(struct.calcsize("<Qdddd")))
        adam = Adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam.t = t
        for arrs in (adam.m, adam.v):
            for i, p in enumerate(params):
                n = p.data.size
                arrs[i] = np.frombuffer(take(4 * n), dtype="<f4").reshape(p.data.shape).astype(np.float32)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return model, adam
