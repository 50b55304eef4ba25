"""2-D float32 tensors and the partitions that define scaling blocks.

Every supported partition is a regular tiling, so a partition reduces to a
tile shape ``(tile_rows, tile_cols)`` over the tensor. Edge tiles may be
ragged. Blocks enumerate in row-major block order.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from morq import kernels

MORT_MAGIC = b"MORT"
MORT_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class Axis(str, Enum):
    ROW = "row"
    COL = "col"


class PartitionKind(str, Enum):
    TENSOR = "tensor"
    BLOCK = "block"
    CHANNEL = "channel"
    SUBCHANNEL = "subchannel"


@dataclass(frozen=True)
class PartitionSpec:
    kind: PartitionKind
    block_rows: int = 0
    block_cols: int = 0
    axis: Axis = Axis.ROW
    length: int = 0

    def __post_init__(self):
        if self.kind is PartitionKind.BLOCK and (self.block_rows < 1 or self.block_cols < 1):
            raise ValueError("block dimensions must be >= 1")
        if self.kind is PartitionKind.SUBCHANNEL and self.length < 1:
            raise ValueError("sub-channel length must be >= 1")

    @classmethod
    def per_tensor(cls) -> PartitionSpec:
        return cls(PartitionKind.TENSOR)

    @classmethod
    def block(cls, rows: int = 128, cols: int | None = None) -> PartitionSpec:
        return cls(PartitionKind.BLOCK, rows, rows if cols is None else cols)

    @classmethod
    def per_channel(cls, axis: Axis | str = Axis.ROW) -> PartitionSpec:
        return cls(PartitionKind.CHANNEL, axis=Axis(axis))

    @classmethod
    def sub_channel(cls, axis: Axis | str = Axis.ROW, length: int = 128) -> PartitionSpec:
        return cls(PartitionKind.SUBCHANNEL, axis=Axis(axis), length=length)

    @classmethod
    def parse(cls, text: str) -> PartitionSpec:
        """Parse ``tensor``, ``block:128x128``, ``block:64``, ``channel:row``,
        ``subchannel:row:128``."""
        text = text.strip().lower()
        if text in ("tensor", "per-tensor"):
            return cls.per_tensor()
        m = re.fullmatch(r"block:(\d+)(?:x(\d+))?", text)
        if m:
            return cls.block(int(m.group(1)), int(m.group(2) or m.group(1)))
        m = re.fullmatch(r"channel(?::(row|col))?", text)
        if m:
            return cls.per_channel(m.group(1) or "row")
        m = re.fullmatch(r"subchannel:(row|col):(\d+)", text)
        if m:
            return cls.sub_channel(m.group(1), int(m.group(2)))
        raise ValueError(f"unrecognized partition spec {text!r}")

    def __str__(self) -> str:
        if self.kind is PartitionKind.TENSOR:
            return "tensor"
        if self.kind is PartitionKind.BLOCK:
            return f"block:{self.block_rows}x{self.block_cols}"
        if self.kind is PartitionKind.CHANNEL:
            return f"channel:{self.axis.value}"
        return f"subchannel:{self.axis.value}:{self.length}"

    def with_axis(self, axis: Axis | str) -> PartitionSpec:
        """Same partition with the channel axis replaced (no-op for others)."""
        if self.kind in (PartitionKind.CHANNEL, PartitionKind.SUBCHANNEL):
            return PartitionSpec(self.kind, axis=Axis(axis), length=self.length)
        return self

    def tile_shape(self, rows: int, cols: int) -> tuple[int, int]:
        if self.kind is PartitionKind.TENSOR:
            return rows, cols
        if self.kind is PartitionKind.BLOCK:
            return self.block_rows, self.block_cols
        if self.kind is PartitionKind.CHANNEL:
            return (1, cols) if self.axis is Axis.ROW else (rows, 1)
        return (1, self.length) if self.axis is Axis.ROW else (self.length, 1)

    def grid_shape(self, rows: int, cols: int) -> tuple[int, int]:
        tr, tc = self.tile_shape(rows, cols)
        return -(-rows // tr), -(-cols // tc)


@dataclass(frozen=True)
class BlockView:
    block_id: int
    row_range: tuple[int, int]
    col_range: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_range[1] - self.row_range[0], self.col_range[1] - self.col_range[0]

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(*self.row_range), slice(*self.col_range)


@dataclass
class TensorF32:
    values: np.ndarray
    key: Any = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, order="C")
        if v.ndim != 2:
            raise ValueError(f"TensorF32 is 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("TensorF32 values must be finite")
        v.setflags(write=False)
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def block(self, b: BlockView) -> np.ndarray:
        return self.values[b.slices]

    def grid_stats(self, spec: PartitionSpec):
        """Cached ``(amax, nonzero_minabs, nnz)`` grids for a partition."""
        tile = spec.tile_shape(self.rows, self.cols)
        if tile not in self._cache:
            self._cache[tile] = kernels.block_stats(self.values, *tile)
        return self._cache[tile]


def as_tensor(t) -> TensorF32:
    return t if isinstance(t, TensorF32) else TensorF32(np.asarray(t, dtype=np.float32))


def partition_blocks(t: TensorF32, spec: PartitionSpec) -> list[BlockView]:
    if t.rows == 0 or t.cols == 0:
        raise ValueError("cannot partition an empty tensor")
    tr, tc = spec.tile_shape(t.rows, t.cols)
    nbr, nbc = spec.grid_shape(t.rows, t.cols)
    return [
        BlockView(
            bi * nbc + bj,
            (bi * tr, min((bi + 1) * tr, t.rows)),
            (bj * tc, min((bj + 1) * tc, t.cols)),
        )
        for bi in range(nbr)
        for bj in range(nbc)
    ]


def block_amax(t: TensorF32, b: BlockView) -> float:
    blk = t.block(b)
    return float(np.abs(blk).max()) if blk.size else 0.0


def nonzero_minabs(t: TensorF32, b: BlockView) -> float | None:
    a = np.abs(t.block(b))
    a = a[a > 0]
    return float(a.min()) if a.size else None


def read_mort(path: str | Path) -> TensorF32:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated MORT header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MORT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != MORT_VERSION:
        raise ValueError(f"{path}: unsupported MORT version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return TensorF32(values.astype(np.float32))


def mort_bytes(t: TensorF32 | np.ndarray) -> bytes:
    v = as_tensor(t).values
    return _HEADER.pack(MORT_MAGIC, MORT_VERSION, v.shape[0], v.shape[1]) + v.astype("<f4").tobytes()


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_mort(path: str | Path, t: TensorF32 | np.ndarray) -> None:
    atomic_write(path, mort_bytes(t))
