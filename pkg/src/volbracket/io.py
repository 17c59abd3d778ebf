"""Binary codecs for grid fields (FGRID) and voxel sets (VOXSET), and JSON reports.

FGRID:  b"FGRD", u32 version=1, u32 n, u32 resolution[n], f64 period[n],
        then resolution**n f64 values, row-major with axis 0 slowest.
VOXSET: b"VOXS", u32 version=1, u32 n, f64 voxel_size, f64 origin[n],
        u64 count, then count*n i32 indices.
All numbers little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .evalmap import VoxelSet
from .grid import DomainError, GridField, TorusDomain

FGRID_MAGIC = b"FGRD"
VOXSET_MAGIC = b"VOXS"
VERSION = 1


class FormatError(ValueError):
    """A binary file is truncated, has the wrong magic, or an unknown version."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated {self.what} file")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def header(self, magic: bytes) -> None:
        if self.take(4) != magic:
            raise FormatError(f"bad magic in {self.what} file")
        (version,) = self.unpack("I")
        if version != VERSION:
            raise FormatError(f"unsupported {self.what} version {version}")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in {self.what} file")


def fgrid_bytes(field: GridField) -> bytes:
    d = field.domain
    head = FGRID_MAGIC + struct.pack(f"<II{d.n}I{d.n}d", VERSION, d.n,
                                     *([d.resolution] * d.n), *d.period)
    return head + field.values.astype("<f8").tobytes()


def parse_fgrid(data: bytes) -> GridField:
    r = _Reader(data, "FGRID")
    r.header(FGRID_MAGIC)
    (n,) = r.unpack("I")
    if n not in (2, 3):
        raise FormatError(f"FGRID dimension {n} not supported")
    res = r.unpack(f"{n}I")
    period = r.unpack(f"{n}d")
    if len(set(res)) != 1:
        raise FormatError("FGRID files with unequal resolutions per axis are not supported")
    try:
        domain = TorusDomain(n, res[0], period)
    except DomainError as exc:
        raise FormatError(str(exc)) from None
    values = r.array("<f8", res[0] ** n)
    r.finish()
    try:
        return GridField(domain, values)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def write_fgrid(path, field: GridField) -> None:
    Path(path).write_bytes(fgrid_bytes(field))


def read_fgrid(path) -> GridField:
    return parse_fgrid(Path(path).read_bytes())


def voxset_bytes(k: VoxelSet) -> bytes:
    occ = np.asarray(k.occupied)
    if len(occ) and (occ.min() < np.iinfo(np.int32).min or occ.max() > np.iinfo(np.int32).max):
        raise FormatError("voxel indices do not fit in i32")
    head = VOXSET_MAGIC + struct.pack(f"<IId{k.n}dQ", VERSION, k.n, k.voxel_size,
                                      *k.origin, k.count)
    return head + occ.astype("<i4").tobytes()


def parse_voxset(data: bytes) -> VoxelSet:
    r = _Reader(data, "VOXSET")
    r.header(VOXSET_MAGIC)
    (n,) = r.unpack("I")
    if n < 1 or n > 16:
        raise FormatError(f"VOXSET dimension {n} not supported")
    (voxel_size,) = r.unpack("d")
    origin = r.unpack(f"{n}d")
    (count,) = r.unpack("Q")
    idx = r.array("<i4", count * n).reshape(count, n)
    r.finish()
    try:
        return VoxelSet(n, voxel_size, np.asarray(origin), idx.astype(np.int64))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def write_voxset(path, k: VoxelSet) -> None:
    Path(path).write_bytes(voxset_bytes(k))


def read_voxset(path) -> VoxelSet:
    return parse_voxset(Path(path).read_bytes())


def dumps_report(obj: dict) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(path, obj: dict) -> None:
    Path(path).write_text(dumps_report(obj))


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
