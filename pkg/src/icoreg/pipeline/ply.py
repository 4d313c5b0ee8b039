"""Minimal PLY reader/writer for vertex positions.

Reads ASCII and binary little-endian files. Only the ``vertex`` element's ``x``, ``y``,
``z`` properties are kept; other properties and elements are parsed and dropped.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from numpy.typing import NDArray

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


class PlyError(ValueError):
    pass


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    elements: list[tuple[str, int, list]] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyError("header ended before 'end_header'")
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyError(f"malformed format line: {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"malformed element line: {raw!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _TYPES or tok[3] not in _TYPES:
                    raise PlyError(f"unknown list property type in {raw!r}")
                elements[-1][2].append((tok[4], ("list", _TYPES[tok[2]], _TYPES[tok[3]])))
            elif len(tok) == 3 and tok[1] in _TYPES:
                elements[-1][2].append((tok[2], _TYPES[tok[1]]))
            else:
                raise PlyError(f"malformed property line: {raw!r}")
        else:
            raise PlyError(f"unexpected header line: {raw!r}")
    if fmt == "binary_big_endian":
        raise PlyError("binary_big_endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unknown PLY format {fmt!r}")
    return fmt, elements


def _xyz_columns(props) -> list[int]:
    names = [p[0] for p in props]
    try:
        return [names.index(c) for c in "xyz"]
    except ValueError:
        raise PlyError("vertex element lacks x/y/z properties") from None


def read_ply(path: str | Path) -> NDArray:
    """Vertex positions as an ``(N, 3)`` float64 array."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    if fmt == "ascii":
        return _read_ascii(body, elements)
    return _read_binary(body, elements)


def _read_ascii(body: bytes, elements) -> NDArray:
    lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
    pos = 0
    out = None
    for name, count, props in elements:
        if pos + count > len(lines):
            raise PlyError(f"truncated ASCII payload in element {name!r}")
        rows = lines[pos : pos + count]
        pos += count
        if name != "vertex":
            continue
        if any(isinstance(p[1], tuple) for p in props):
            raise PlyError("list properties on vertices are not supported")
        cols = _xyz_columns(props)
        try:
            vals = [[float(v) for v in r.split()] for r in rows]
        except ValueError as e:
            raise PlyError(f"non-numeric vertex value: {e}") from None
        if any(len(v) != len(props) for v in vals):
            raise PlyError("vertex row has the wrong number of values")
        arr = np.array(vals, dtype=np.float64).reshape(count, len(props))
        out = arr[:, cols]
    if out is None:
        raise PlyError("no vertex element")
    return out


def _read_binary(body: bytes, elements) -> NDArray:
    off = 0
    out = None
    for name, count, props in elements:
        if any(isinstance(p[1], tuple) for p in props):
            if name == "vertex":
                raise PlyError("list properties on vertices are not supported")
            off = _skip_list_element(body, off, count, props)
            continue
        dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        need = dt.itemsize * count
        if off + need > len(body):
            raise PlyError(f"truncated binary payload in element {name!r}")
        rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
        off += need
        if name == "vertex":
            _xyz_columns(props)
            out = np.stack([rec[c].astype(np.float64) for c in "xyz"], axis=1)
    if out is None:
        raise PlyError("no vertex element")
    return out


def _skip_list_element(body: bytes, off: int, count: int, props) -> int:
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                _, ct, it = t
                csz = np.dtype(ct).itemsize
                if off + csz > len(body):
                    raise PlyError("truncated binary list payload")
                n = int(np.frombuffer(body, "<" + ct, 1, off)[0])
                off += csz + n * np.dtype(it).itemsize
            else:
                off += np.dtype(t).itemsize
            if off > len(body):
                raise PlyError("truncated binary list payload")
    return off


def write_ply(path: str | Path, points: NDArray, binary: bool = True) -> None:
    """Write ``(N, 3)`` positions as float32 x/y/z, binary little-endian by default."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(P)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(P.astype("<f4").tobytes())
        else:
            for row in P.astype(np.float32).astype(np.float64):
                fh.write(" ".join(repr(float(v)) for v in row).encode("ascii") + b"\n")
