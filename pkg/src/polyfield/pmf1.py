"""PMF1 voxel field files: bit-exact storage for (H, Dz, Dy, Dx) arrays.

Layout (little-endian throughout):
    bytes 0..7   magic "PMFIELD1"
    u32          version (1)
    u32          H
    u32 x3       Dx, Dy, Dz
    u8           dtype code: 0 = float32, 1 = float64
    bytes x3     reserved (zero)
    payload      raw values, channel-major, x fastest

The payload order is exactly the C order of an (H, Dz, Dy, Dx) array.
Statistics grids are stored in the same container with channels standing
in for channel pairs.  Writes are atomic (temp file + rename).
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

__all__ = ["write_field", "read_field", "PMF1Error"]

_MAGIC = b"PMFIELD1"
_HEADER = struct.Struct("<8sIIIIIB3x")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"float32": 0, "float64": 1}
_MAX_VOXELS = 1 << 36  # refuse absurd headers before allocating


class PMF1Error(ValueError):
    pass


def write_field(path, field, dtype="float32"):
    """Write an (H, Dz, Dy, Dx) array; returns the byte count."""
    field = np.asarray(field)
    if field.ndim != 4:
        raise PMF1Error(f"field must be (H, Dz, Dy, Dx), got {field.shape}")
    if dtype not in _CODES:
        raise PMF1Error(f"unsupported dtype {dtype!r}")
    if not np.isfinite(field).all():
        raise PMF1Error("non-finite field values")
    code = _CODES[dtype]
    h, dz, dy, dx = field.shape
    header = _HEADER.pack(_MAGIC, 1, h, dx, dy, dz, code)
    payload = np.ascontiguousarray(field, dtype=_DTYPES[code]).tobytes()
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".pmf1.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(header) + len(payload)


def read_field(path):
    """Read a PMF1 file back as float64 (H, Dz, Dy, Dx)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise PMF1Error(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, dx, dy, dz, code = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise PMF1Error(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise PMF1Error(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise PMF1Error(f"{path}: unknown dtype code {code}")
    n = int(h) * int(dx) * int(dy) * int(dz)
    if min(h, dx, dy, dz) < 1 or n > _MAX_VOXELS:
        raise PMF1Error(f"{path}: implausible dims H={h} ({dx},{dy},{dz})")
    want = _HEADER.size + n * _DTYPES[code].itemsize
    if len(raw) != want:
        raise PMF1Error(f"{path}: size {len(raw)} != expected {want}")
    data = np.frombuffer(raw, dtype=_DTYPES[code], offset=_HEADER.size)
    return data.reshape(h, dz, dy, dx).astype(np.float64)
