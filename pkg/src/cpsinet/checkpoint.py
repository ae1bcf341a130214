"""Binary checkpoints: parameters, optimizer moments and the run config.

Layout (little-endian)::

    8 bytes   magic b"CPSICKPT"
    4 bytes   format version (uint32)
    4 bytes   header length n (uint32)
    n bytes   UTF-8 JSON header, sorted keys
    records   one per parameter, then one per first moment, then one per
              second moment, each in the header's parameter order:
                  uint16 name length, name bytes, uint8 rank,
                  rank * uint32 shape, float32 values
    4 bytes   CRC-32 of everything before it

The JSON header holds the run config (which embeds the model config), the
per-voxel loss flag, seed, step counter and the parameter names.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import List, Tuple

import numpy as np

from .network import Parameters
from .tensor import Tensor
from .training import OptimizerState, TrainRunConfig

__all__ = ["CheckpointError", "MAGIC", "VERSION", "encode_checkpoint", "decode_checkpoint",
           "save_checkpoint", "load_checkpoint"]

MAGIC = b"CPSICKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode_checkpoint(params: Parameters, state: OptimizerState, run: TrainRunConfig) -> bytes:
    names = list(params)
    if set(names) != set(state.m) or set(names) != set(state.v):
        raise CheckpointError("optimizer buffers do not match the parameter names")
    for n in names:
        if params[n].data.shape != state.m[n].shape or params[n].data.shape != state.v[n].shape:
            raise CheckpointError(f"optimizer buffer shape mismatch for {n!r}")
    header = {
        "run": run.to_dict(),
        "per_voxel_loss": run.per_voxel_loss,
        "seed": run.seed,
        "step": state.step,
        "optimizer": {"lr": state.lr, "betas": list(state.betas), "eps": state.eps},
        "parameters": names,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    for group in ([p.data for p in params.values()], [state.m[n] for n in names],
                  [state.v[n] for n in names]):
        parts.extend(_record(n, a) for n, a in zip(names, group))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def record(self) -> Tuple[str, np.ndarray]:
        (ln,) = struct.unpack("<H", self.take(2, "record name length"))
        name = self.take(ln, "record name").decode("utf-8")
        (rank,) = struct.unpack("<B", self.take(1, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank, f"shape of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(4 * count, f"values of {name!r}")
        return name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def decode_checkpoint(buf: bytes):
    """Parse checkpoint bytes into ``(params, state, run)``; nothing is returned on error."""
    if len(buf) < _PREFIX.size + 4:
        raise CheckpointError(f"truncated: {len(buf)} bytes")
    magic, version, n = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {VERSION}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    body = buf[:-4]
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    r = _Reader(body, _PREFIX.size)
    try:
        header = json.loads(r.take(n, "header").decode("utf-8"))
        run = TrainRunConfig.from_dict(header["run"])
        names: List[str] = header["parameters"]
        opt = header["optimizer"]
        step, lr, betas, eps = int(header["step"]), float(opt["lr"]), tuple(opt["betas"]), float(opt["eps"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid header: {exc}") from None
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in header")
    groups = []
    for label in ("parameter", "first moment", "second moment"):
        group = {}
        for expected in names:
            name, arr = r.record()
            if name in group:
                raise CheckpointError(f"name collision: {label} {name!r} appears twice")
            if name != expected:
                raise CheckpointError(f"{label} record {name!r} out of order, expected {expected!r}")
            group[name] = arr
        groups.append(group)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after records")
    params = {k: Tensor(v, requires_grad=True) for k, v in groups[0].items()}
    state = OptimizerState(groups[1], groups[2], step, lr, betas, eps)
    return params, state, run


def save_checkpoint(params: Parameters, state: OptimizerState, run: TrainRunConfig, path) -> None:
    data = encode_checkpoint(params, state, run)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
