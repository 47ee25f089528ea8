"""Binary snapshots and CSV output.

Snapshot layout, all little-endian: 8-byte magic ``OBTORUS1``, u32 format
version, u32 n1, n2, n3, f64 t, f64 eps, then the nodal u (3 components)
and sigma (components 11, 22, 33, 12, 13, 23) as f64 in C order.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .diagnostics import CSV_HEADER
from .diffusive import SYM
from .model import SimState
from .spectral import Field, Grid
from .vorticity import curl

MAGIC = b"OBTORUS1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIdd")


class SnapshotError(ValueError):
    """Unreadable, truncated or foreign snapshot file."""


def write_snapshot(path, s: SimState, eps: float = 0.0):
    g = s.grid
    u = np.asarray(s.u.values, dtype="<f8")
    sv = s.sigma.values
    sig = np.stack([sv[i, j] for i, j in SYM]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, g.n1, g.n2, g.n3, float(s.t), float(eps)))
        fh.write(np.ascontiguousarray(u).tobytes())
        fh.write(np.ascontiguousarray(sig).tobytes())


def read_snapshot(path):
    """Return (state, eps). The vorticity is recomputed from the stored velocity."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SnapshotError("truncated snapshot header")
    magic, version, n1, n2, n3, t, eps = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    try:
        g = Grid(n1, n2, n3)
    except ValueError as e:
        raise SnapshotError(str(e)) from None
    count = 9 * g.size
    if len(data) != _HEADER.size + 8 * count:
        raise SnapshotError(f"expected {count} values after the header, file size disagrees")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    u = arr[: 3 * g.size].reshape((3,) + g.shape)
    s6 = arr[3 * g.size:].reshape((6,) + g.shape)
    full = np.empty((3, 3) + g.shape)
    for c, (i, j) in enumerate(SYM):
        full[i, j] = s6[c]
        full[j, i] = s6[c]
    uf = Field(g, values=u)
    return SimState(float(t), curl(uf), Field(g, values=full, symmetric=True), uf), float(eps)


def write_csv(path, records):
    """One row per diagnostics record; floats written with repr so they read back exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([repr(float(x)) for x in r.row()])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a diagnostics CSV")
    return [dict(zip(CSV_HEADER, map(float, r))) for r in rows[1:]]
