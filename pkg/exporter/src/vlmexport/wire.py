"""Engine wire formats the exporter emits or consumes.

This module re-implements the little-endian container layouts from the
engine's published format contract; the exporter deliberately does not
import the engine, so these writers ARE the interface. Only what the
exporter needs is implemented: EMB1/FMP1 writing and MSK1/MSKS reading.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1
IGNORE_ID = 0xFFFFFFFF


class WireError(Exception):
    """Malformed file or payload at the exporter/engine boundary."""


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise WireError(f"embeddings must be 2-D, got {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise WireError("embeddings contain non-finite values")
    rows, dim = matrix.shape
    header = b"EMB1" + struct.pack("<IIQQ", VERSION, 0, rows, dim)
    atomic_write(path, header + matrix.tobytes())


def write_feature_map(path: str | Path, feat: np.ndarray) -> None:
    feat = np.ascontiguousarray(feat, dtype="<f4")
    if feat.ndim != 3:
        raise WireError(f"feature map must be (gh, gw, d), got {feat.shape}")
    if not np.isfinite(feat).all():
        raise WireError("feature map contains non-finite values")
    gh, gw, dim = feat.shape
    header = b"FMP1" + struct.pack("<IQQQ", VERSION, gh, gw, dim)
    atomic_write(path, header + feat.tobytes())


def _header(data: bytes, magic: bytes) -> int:
    if data[:4] != magic:
        raise WireError(f"expected {magic!r}, found {data[:4]!r}")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    return 8


def read_embeddings(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    offset = _header(data, b"EMB1")
    dtype, rows, dim = struct.unpack_from("<IQQ", data, offset)
    offset += 20
    if dtype != 0:
        raise WireError(f"unsupported dtype code {dtype}")
    if len(data) != offset + rows * dim * 4:
        raise WireError(f"{path}: length disagrees with header")
    return np.frombuffer(data, dtype="<f4", count=rows * dim, offset=offset).reshape(
        rows, dim
    ).copy()


def read_mask_raster(path: str | Path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    offset = _header(data, b"MSK1")
    h, w, k = struct.unpack_from("<QQQ", data, offset)
    offset += 24
    if len(data) != offset + h * w * 4:
        raise WireError(f"{path}: length disagrees with header")
    ids = np.frombuffer(data, dtype="<u4", count=h * w, offset=offset).reshape(h, w)
    return ids.copy(), k


def read_mask_stack(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    offset = _header(data, b"MSKS")
    h, w, k = struct.unpack_from("<QQQ", data, offset)
    offset += 24
    masks = []
    for i in range(k):
        if offset + 4 > len(data):
            raise WireError(f"{path}: truncated in mask {i}")
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + 4 * count > len(data):
            raise WireError(f"{path}: truncated in mask {i} runs")
        runs = np.frombuffer(data, dtype="<u4", count=count, offset=offset).astype(np.int64)
        offset += 4 * count
        if runs.sum() != h * w:
            raise WireError(f"{path}: mask {i} runs do not cover the raster")
        values = (np.arange(runs.size) % 2).astype(bool)
        masks.append(np.repeat(values, runs).reshape(h, w))
    if offset != len(data):
        raise WireError(f"{path}: trailing bytes")
    if not masks:
        return np.zeros((0, h, w), dtype=bool)
    return np.stack(masks)


def load_masks(stem: Path) -> list[np.ndarray]:
    """Binary masks for one image from its .msk (partition) or .msks file."""
    msk = stem.with_suffix(".msk")
    if msk.exists():
        ids, k = read_mask_raster(msk)
        return [(ids == i) for i in range(k)]
    msks = stem.with_suffix(".msks")
    if msks.exists():
        return list(read_mask_stack(msks))
    raise WireError(f"no mask file for {stem.name}")


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]
    atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_json(path: str | Path, payload: dict) -> None:
    atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))
