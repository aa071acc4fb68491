"""`EVAR` snapshot container for representations and target images.

Layout: magic "EVAR", kind u8 (0 = ec f32, 1 = ts f32, 2 = quantized u8,
3 = representation f32), channels u16, tile side u16, grid rows u16, grid
cols u16, watermark u64 (max event timestamp, as u64; 0 if none), then the
payload in channel-major (C, rows*tile, cols*tile) order, then one u64
watermark per patch (rows * cols entries). Target images use a 1x1 grid
with tile = P.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EVAR"
KIND_EC = 0
KIND_TS = 1
KIND_QUANT = 2
KIND_REPR = 3

_HEADER = struct.Struct("<4sBHHHHQ")


class SnapshotError(ValueError):
    pass


@dataclass
class Snapshot:
    kind: int
    values: np.ndarray            # (C, rows*tile, cols*tile), f32 or u8
    watermark: int
    grid: tuple[int, int]
    tile: int
    patch_watermarks: np.ndarray  # (rows, cols) int64, -1 where unseen


def dump_snapshot(kind: int, values: np.ndarray, watermark: int,
                  grid: tuple[int, int] = (1, 1),
                  patch_watermarks: np.ndarray | None = None) -> bytes:
    C, H, W = values.shape
    rows, cols = grid
    if H % rows or W % cols or H // rows != W // cols:
        raise SnapshotError(f"values {values.shape} not square-tileable by grid {grid}")
    tile = H // rows
    if patch_watermarks is None:
        patch_watermarks = np.full((rows, cols), watermark, dtype=np.int64)
    dtype = "<u1" if kind == KIND_QUANT else "<f4"
    header = _HEADER.pack(MAGIC, kind, C, tile, rows, cols, max(watermark, 0))
    wm = np.where(patch_watermarks < 0, 0, patch_watermarks).astype("<u8")
    return header + np.ascontiguousarray(values, dtype=dtype).tobytes() + wm.tobytes()


def load_snapshot(data: bytes) -> Snapshot:
    magic, kind, C, tile, rows, cols, watermark = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    pos = _HEADER.size
    dtype = np.dtype("<u1") if kind == KIND_QUANT else np.dtype("<f4")
    count = C * rows * tile * cols * tile
    values = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    values = values.reshape(C, rows * tile, cols * tile).copy()
    pos += count * dtype.itemsize
    wm = np.frombuffer(data, dtype="<u8", count=rows * cols, offset=pos)
    pos += 8 * rows * cols
    if pos != len(data):
        raise SnapshotError("trailing bytes in snapshot")
    return Snapshot(kind, values, int(watermark), (rows, cols), tile,
                    wm.reshape(rows, cols).astype(np.int64))


def write_snapshot(path, *args, **kwargs) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_snapshot(*args, **kwargs))


def read_snapshot(path) -> Snapshot:
    with open(path, "rb") as fh:
        return load_snapshot(fh.read())
