"""Binary tensor and checkpoint files.

Tensor layout (little-endian throughout): rank as uint64, then each
dimension as uint64, then the values as float64 in row-major order.

A checkpoint is a container of named tensor records: the trainable
parameters plus any batch-norm running statistics, so a trained model can
be rebuilt exactly (bit-for-bit) for later quantization sweeps or contour
scans.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError
from .models import ParamEntry, ParamSet

CHECKPOINT_MAGIC = b"HLABCKPT"
CHECKPOINT_VERSION = 1

# record roles inside a checkpoint
_ROLE_PARAM = 0
_ROLE_BUFFER = 1

_KIND_CODES = {"weight": 0, "bias": 1, "bn_scale": 2, "bn_shift": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def write_tensor(fh, array: np.ndarray):
    a = np.asarray(array, dtype=np.float64)
    if a.ndim:
        # ascontiguousarray would promote a 0-d array to shape (1,)
        a = np.ascontiguousarray(a)
    fh.write(struct.pack("<Q", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
    fh.write(a.astype("<f8").tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated tensor stream: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(fh) -> np.ndarray:
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
    if rank > 32:
        raise DataFormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = 1
    for d in dims:
        if d == 0:
            raise DataFormatError("tensor dimensions must be positive")
        count *= d
    raw = _read_exact(fh, 8 * count)
    return np.frombuffer(raw, dtype="<f8").reshape(dims).copy()


def save_tensor(path, array: np.ndarray):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, params: ParamSet, running_stats=None):
    running_stats = running_stats or {}
    records = []
    for e in params:
        flags = (1 if e.trainable else 0) | (2 if e.perturbable else 0)
        records.append((e.name, _ROLE_PARAM, _KIND_CODES[e.kind], flags, e.value))
    for bn, (m, v) in sorted(running_stats.items()):
        records.append((f"{bn}.running_mean", _ROLE_BUFFER, 0, 0, m))
        records.append((f"{bn}.running_var", _ROLE_BUFFER, 0, 0, v))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQ", CHECKPOINT_VERSION, len(records)))
        for name, role, kind, flags, value in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BBB", role, kind, flags))
            write_tensor(fh, value)


def load_checkpoint(path) -> tuple[ParamSet, dict[str, tuple[np.ndarray, np.ndarray]]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<QQ", _read_exact(fh, 16))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        entries = []
        buffers: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
            name = _read_exact(fh, name_len).decode("utf-8")
            role, kind, flags = struct.unpack("<BBB", _read_exact(fh, 3))
            value = read_tensor(fh)
            if role == _ROLE_PARAM:
                if kind not in _KIND_NAMES:
                    raise DataFormatError(f"unknown parameter kind code {kind} for {name}")
                entries.append(ParamEntry(name=name, value=value, kind=_KIND_NAMES[kind],
                                          trainable=bool(flags & 1)))
            elif role == _ROLE_BUFFER:
                buffers[name] = value
            else:
                raise DataFormatError(f"unknown record role {role} for {name}")
        if fh.read(1):
            raise DataFormatError("trailing bytes after checkpoint records")
    running: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, value in buffers.items():
        if name.endswith(".running_mean"):
            bn = name[: -len(".running_mean")]
            var = buffers.get(f"{bn}.running_var")
            if var is None:
                raise DataFormatError(f"checkpoint has {name} without a matching running_var")
            running[bn] = (value, var)
        elif not name.endswith(".running_var"):
            raise DataFormatError(f"unknown buffer record {name}")
    return ParamSet(entries), running
