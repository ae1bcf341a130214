"""Volumes and their on-disk format.

File layout (all little-endian)::

    offset  size  field
    0       8     magic  b"CPSIVOL" + b"L"   (trailing byte encodes endianness)
    8       4     format version, uint32 (currently 1)
    12      12    dims D, H, W, uint32 each
    24      24    voxel size in mm, float64 each
    48      1     unit code: 0 ppm, 1 radians, 2 dimensionless
    49      3     reserved, must be zero
    52      4     CRC-32 of bytes 0..51
    56      4*D*H*W  payload, float32, row-major (D, H, W)

The header checksum means any single corrupted header byte is rejected
rather than misread.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Tuple

import numpy as np

__all__ = [
    "UNITS",
    "Volume",
    "VolumeFormatError",
    "HEADER_SIZE",
    "MAGIC",
    "encode_volume",
    "decode_volume",
    "write_volume",
    "read_volume",
    "check_mask",
]

UNITS = ("ppm", "radians", "dimensionless")
MAGIC = b"CPSIVOLL"
VERSION = 1
_HEAD = struct.Struct("<8sI3I3dB3x")
HEADER_SIZE = _HEAD.size + 4
MIN_DIM = 8
MAX_DIM = 4096
MAX_VOXELS = 1 << 30


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file."""


@dataclass(eq=False)
class Volume:
    """A 3D scalar field with voxel size (mm) and a unit tag.

    ``data`` is stored as float32, the precision of the file format, so a
    write/read round trip is exact.
    """

    data: np.ndarray
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: str = "dimensionless"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"a volume is rank 3, got shape {data.shape}")
        if min(data.shape) < MIN_DIM:
            raise ValueError(f"every axis needs >= {MIN_DIM} voxels, got {data.shape}")
        self.data = data
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be three positive numbers, got {self.voxel_size}")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, unit: str | None = None) -> "Volume":
        return Volume(data, self.voxel_size, self.unit if unit is None else unit)

    def equals(self, other: "Volume") -> bool:
        """Bit-exact equality of values and metadata."""
        return (self.dims == other.dims and self.voxel_size == other.voxel_size
                and self.unit == other.unit
                and self.data.tobytes() == other.data.tobytes())


def check_mask(mask: Volume) -> np.ndarray:
    """Return a boolean array for a {0, 1} dimensionless volume."""
    if mask.unit != "dimensionless":
        raise ValueError(f"masks are dimensionless, got unit {mask.unit!r}")
    values = np.unique(mask.data)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValueError(f"mask values must be 0 or 1, found {values[:5]}")
    return mask.data == 1.0


def encode_volume(v: Volume) -> bytes:
    head = _HEAD.pack(MAGIC, VERSION, *v.dims, *v.voxel_size, UNITS.index(v.unit))
    crc = struct.pack("<I", zlib.crc32(head))
    return head + crc + v.data.astype("<f4", copy=False).tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < HEADER_SIZE:
        raise VolumeFormatError(f"truncated header: {len(buf)} bytes < {HEADER_SIZE}")
    head = buf[:_HEAD.size]
    magic, version, d, h, w, vx, vy, vz, unit = _HEAD.unpack(head)
    if magic != MAGIC:
        if magic[:7] == MAGIC[:7]:
            raise VolumeFormatError(f"unsupported byte order marker {magic[7:]!r}")
        raise VolumeFormatError(f"bad magic {magic!r}")
    (crc,) = struct.unpack_from("<I", buf, _HEAD.size)
    if crc != zlib.crc32(head):
        raise VolumeFormatError("header checksum mismatch")
    if version != VERSION:
        raise VolumeFormatError(f"unknown format version {version}")
    if head[-3:] != b"\0\0\0":
        raise VolumeFormatError("reserved header bytes are not zero")
    dims = (d, h, w)
    if min(dims) < MIN_DIM or max(dims) > MAX_DIM or d * h * w > MAX_VOXELS:
        raise VolumeFormatError(f"dims out of range: {dims}")
    if unit >= len(UNITS):
        raise VolumeFormatError(f"unknown unit code {unit}")
    if not all(np.isfinite(s) and s > 0 for s in (vx, vy, vz)):
        raise VolumeFormatError(f"invalid voxel size {(vx, vy, vz)}")
    expected = 4 * d * h * w
    payload = buf[HEADER_SIZE:]
    if len(payload) != expected:
        raise VolumeFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, (vx, vy, vz), UNITS[unit])


def write_volume(v: Volume, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_volume(v))
    os.replace(tmp, path)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())
