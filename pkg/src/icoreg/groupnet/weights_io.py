"""Versioned little-endian weights file.

Layout::

    magic    4s   b"ICGW"
    version  <u4  1
    counts   <u4 x3   embedder layers, regressor conv layers, regressor MLP layers
    meta     <u4 length + UTF-8 JSON
    tensors  for each: <u4 ndim, <u4 x ndim shape, float32 row-major payload

Tensors appear as (weight, bias) per layer: embedder, then regressor conv, then MLP.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ConvLayer, DenseLayer, NetworkWeights, RegressorWeights

MAGIC = b"ICGW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _tensors(W: NetworkWeights):
    for l in W.embedder:
        yield l.weight
        yield l.bias
    if W.regressor is not None:
        for l in W.regressor.conv:
            yield l.weight
            yield l.bias
        for l in W.regressor.mlp:
            yield l.weight
            yield l.bias


def save_weights(W: NetworkWeights, path) -> None:
    """Write ``W``; arrays are stored as float32."""
    n_reg = len(W.regressor.conv) if W.regressor else 0
    n_mlp = len(W.regressor.mlp) if W.regressor else 0
    meta = json.dumps(W.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", VERSION, len(W.embedder), n_reg, n_mlp))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for t in _tensors(W):
            a = np.ascontiguousarray(t, dtype="<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes(order="C"))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsFormatError("truncated weights file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals if n > 1 else vals[0]

    def tensor(self) -> np.ndarray:
        ndim = self.u32()
        if ndim < 1 or ndim > 4:
            raise WeightsFormatError(f"bad tensor rank {ndim}")
        shape = self.u32(ndim) if ndim > 1 else (self.u32(),)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def load_weights(path) -> NetworkWeights:
    """Read a weights file written by :func:`save_weights`.

    Raises
    ------
    WeightsFormatError
        Wrong magic, unsupported version, truncation, trailing bytes or inconsistent shapes.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    version, n_emb, n_reg, n_mlp = r.u32(4)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsFormatError(f"corrupt metadata: {e}") from None

    def conv(n):
        return [ConvLayer(r.tensor(), r.tensor()) for _ in range(n)]

    embedder = conv(n_emb)
    regressor = None
    if n_reg:
        rc = conv(n_reg)
        mlp = [DenseLayer(r.tensor(), r.tensor()) for _ in range(n_mlp)]
        regressor = RegressorWeights(rc, mlp)
    if r.pos != len(r.buf):
        raise WeightsFormatError("trailing bytes after last tensor")
    try:
        return NetworkWeights(embedder, regressor, meta)
    except ValueError as e:
        raise WeightsFormatError(f"shape mismatch: {e}") from None
