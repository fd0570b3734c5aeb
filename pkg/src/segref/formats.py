"""Bit-exact file formats and reference-set persistence.

Five little-endian binary container formats, each opening with a 4-byte
magic and a u32 version (currently 1):

    EMB1  embeddings    u32 dtype(0=float32), u64 rows, u64 dim, payload f32
    FMP1  feature maps  u64 grid_h, u64 grid_w, u64 dim, payload f32
    MSK1  id rasters    u64 h, u64 w, u64 k, payload h*w u32 ids
                        (0xFFFFFFFF = ignore; other ids must be < k)
    MSKS  mask stacks   u64 h, u64 w, u64 k, then per mask: u32 run count
                        and that many u32 run lengths, alternating 0/1 runs
                        starting with 0 over the row-major flat raster
    ASG1  assignments   u64 m, u64 n, u64 nnz, then nnz (u64 row, u64 col)
                        pairs sorted strictly increasing row-major

All round-trips are lossless. Readers validate the full file length against
the header before touching the payload and raise typed FormatError
subclasses on any malformed input. Reference sets persist as a directory
(segments.emb, labels.emb, assignments.asg, labels.jsonl, manifest.json);
text lexicons as an EMB1 file plus a .jsonl sidecar of terms.
"""

from __future__ import annotations

import colorsys
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import EmbeddingMatrix, NORM_TOLERANCE
from .errors import (
    BadMagicError,
    BadVersionError,
    ClassOutOfRangeError,
    EncodingError,
    FormatError,
    InvalidInputError,
    ManifestMismatchError,
    NonFiniteError,
    OrphanLabelError,
    OrphanRowOrColumnError,
    OrphanSegmentError,
    TruncatedError,
    UnsupportedDtypeError,
)
from .retrieval import LabelInfo, ReferenceSet
from .segmenter import IGNORE_ID

FORMAT_VERSION = 1

MAGIC_EMB = b"EMB1"
MAGIC_FMP = b"FMP1"
MAGIC_MSK = b"MSK1"
MAGIC_MSKS = b"MSKS"
MAGIC_ASG = b"ASG1"

_KNOWN_MAGICS = (MAGIC_EMB, MAGIC_FMP, MAGIC_MSK, MAGIC_MSKS, MAGIC_ASG)


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _take(data: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(data):
        raise TruncatedError(f"file ends inside {what}")
    return data[offset : offset + count], offset + count


def _parse_header(data: bytes, magic: bytes) -> int:
    got, offset = _take(data, 0, 4, "magic")
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {got!r}")
    raw, offset = _take(data, offset, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    return offset


def _read_u64s(data: bytes, offset: int, count: int, what: str) -> tuple[tuple[int, ...], int]:
    raw, offset = _take(data, offset, 8 * count, what)
    return struct.unpack(f"<{count}Q", raw), offset


def _exact_length(data: bytes, expected: int) -> None:
    if len(data) < expected:
        raise TruncatedError(f"file is {len(data)} bytes but header promises {expected}")
    if len(data) > expected:
        raise TruncatedError(f"file has {len(data) - expected} trailing bytes")


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")


# --- EMB1 -------------------------------------------------------------------

def write_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    _require_finite(matrix.data, "embedding matrix")
    header = MAGIC_EMB + struct.pack(
        "<IIQQ", FORMAT_VERSION, 0, matrix.rows, matrix.dim
    )
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    _atomic_write(path, header + payload)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    offset = _parse_header(data, MAGIC_EMB)
    raw, offset = _take(data, offset, 4, "dtype")
    dtype = struct.unpack("<I", raw)[0]
    if dtype != 0:
        raise UnsupportedDtypeError(f"unknown dtype code {dtype}")
    (rows, dim), offset = _read_u64s(data, offset, 2, "shape")
    _exact_length(data, offset + rows * dim * 4)
    arr = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=offset)
    arr = arr.reshape(rows, dim).copy()
    _require_finite(arr, "embedding payload")
    norms = np.linalg.norm(arr.astype(np.float64), axis=1) if rows else np.empty(0)
    normalized = bool(rows) and bool(np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE))
    return EmbeddingMatrix(arr, normalized=normalized)


# --- FMP1 -------------------------------------------------------------------

def write_feature_map(path: str | Path, feat: np.ndarray) -> None:
    feat = np.ascontiguousarray(feat, dtype="<f4")
    if feat.ndim != 2 and feat.ndim != 3:
        raise InvalidInputError(f"feature map must be (gh, gw, d), got {feat.shape}")
    if feat.ndim == 2:
        feat = feat[:, :, None]
    _require_finite(feat, "feature map")
    gh, gw, dim = feat.shape
    header = MAGIC_FMP + struct.pack("<IQQQ", FORMAT_VERSION, gh, gw, dim)
    _atomic_write(path, header + feat.tobytes())


def read_feature_map(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    offset = _parse_header(data, MAGIC_FMP)
    (gh, gw, dim), offset = _read_u64s(data, offset, 3, "shape")
    _exact_length(data, offset + gh * gw * dim * 4)
    arr = np.frombuffer(data, dtype="<f4", count=gh * gw * dim, offset=offset)
    arr = arr.reshape(gh, gw, dim).copy()
    _require_finite(arr, "feature map payload")
    return arr


# --- MSK1 -------------------------------------------------------------------

def write_mask_raster(path: str | Path, ids: np.ndarray, k: int) -> None:
    ids = np.ascontiguousarray(ids, dtype="<u4")
    if ids.ndim != 2:
        raise InvalidInputError(f"raster must be 2-D, got {ids.shape}")
    _validate_raster_ids(ids, k)
    h, w = ids.shape
    header = MAGIC_MSK + struct.pack("<IQQQ", FORMAT_VERSION, h, w, k)
    _atomic_write(path, header + ids.tobytes())


def _validate_raster_ids(ids: np.ndarray, k: int) -> None:
    valid = ids[ids != np.uint32(IGNORE_ID)]
    if valid.size and int(valid.max()) >= k:
        raise ClassOutOfRangeError(f"raster id {int(valid.max())} >= k={k}")


def read_mask_raster(path: str | Path) -> tuple[np.ndarray, int]:
    """Returns (ids raster, k). Ids are < k or the ignore sentinel."""
    data = Path(path).read_bytes()
    offset = _parse_header(data, MAGIC_MSK)
    (h, w, k), offset = _read_u64s(data, offset, 3, "shape")
    _exact_length(data, offset + h * w * 4)
    ids = np.frombuffer(data, dtype="<u4", count=h * w, offset=offset).reshape(h, w).copy()
    _validate_raster_ids(ids, k)
    return ids, k


# --- MSKS -------------------------------------------------------------------

def write_mask_stack(path: str | Path, stack: np.ndarray) -> None:
    stack = np.asarray(stack).astype(bool)
    if stack.ndim != 3:
        raise InvalidInputError(f"mask stack must be (k, h, w), got {stack.shape}")
    k, h, w = stack.shape
    if h * w > 0xFFFFFFFF:
        raise InvalidInputError("raster too large for u32 run lengths")
    pieces = [MAGIC_MSKS + struct.pack("<IQQQ", FORMAT_VERSION, h, w, k)]
    for i in range(k):
        flat = stack[i].ravel()
        if not flat.any():
            raise EncodingError(f"mask {i} is empty")
        changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds).astype(np.int64)
        if flat[0]:  # runs must start with a 0-run, possibly of length 0
            runs = np.concatenate(([0], runs))
        pieces.append(struct.pack("<I", runs.size))
        pieces.append(runs.astype("<u4").tobytes())
    _atomic_write(path, b"".join(pieces))


def read_mask_stack(path: str | Path) -> np.ndarray:
    """Returns a (k, h, w) boolean stack; every mask is nonempty.

    Runs are parsed and validated against the declared raster size before
    any raster memory is allocated, so malformed headers fail with a typed
    error instead of an allocation attempt.
    """
    data = Path(path).read_bytes()
    offset = _parse_header(data, MAGIC_MSKS)
    (h, w, k), offset = _read_u64s(data, offset, 3, "shape")
    total = h * w
    masks = []
    for i in range(k):
        raw, offset = _take(data, offset, 4, f"mask {i} run count")
        count = struct.unpack("<I", raw)[0]
        raw, offset = _take(data, offset, 4 * count, f"mask {i} runs")
        runs = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        if runs.sum() != total:
            raise EncodingError(f"mask {i}: run lengths sum to {runs.sum()}, expected {total}")
        if runs.size > 1 and (runs[1:] == 0).any():
            raise EncodingError(f"mask {i}: zero-length run after the first")
        if runs.size < 2:  # a nonempty mask needs at least one 1-run
            raise EncodingError(f"mask {i} is empty")
        values = np.arange(runs.size, dtype=np.int64) % 2  # alternating from 0
        masks.append(np.repeat(values.astype(bool), runs).reshape(h, w))
    _exact_length(data, offset)
    if not masks:
        return np.zeros((0, h, w), dtype=bool)
    return np.stack(masks)


# --- ASG1 -------------------------------------------------------------------

def write_assignments(
    path: str | Path, m: int, n: int, rows: np.ndarray, cols: np.ndarray
) -> None:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise InvalidInputError("rows/cols must be equal-length 1-D arrays")
    if rows.size:
        if rows.min() < 0 or rows.max() >= m:
            raise InvalidInputError("assignment row out of range")
        if cols.min() < 0 or cols.max() >= n:
            raise InvalidInputError("assignment col out of range")
    # Canonical form: sorted row-major, duplicates removed.
    pairs = np.unique(np.stack([rows, cols], axis=1), axis=0) if rows.size else np.empty((0, 2))
    header = MAGIC_ASG + struct.pack("<IQQQ", FORMAT_VERSION, m, n, pairs.shape[0])
    _atomic_write(path, header + pairs.astype("<u8").tobytes())


def read_assignments(path: str | Path) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Returns (m, n, rows, cols) with pairs strictly increasing row-major."""
    data = Path(path).read_bytes()
    offset = _parse_header(data, MAGIC_ASG)
    (m, n, nnz), offset = _read_u64s(data, offset, 3, "shape")
    _exact_length(data, offset + nnz * 16)
    pairs = np.frombuffer(data, dtype="<u8", count=nnz * 2, offset=offset).reshape(nnz, 2)
    rows = pairs[:, 0].astype(np.int64)
    cols = pairs[:, 1].astype(np.int64)
    if nnz:
        if rows.min() < 0 or int(pairs[:, 0].max()) >= m:
            raise EncodingError("assignment row out of range")
        if cols.min() < 0 or int(pairs[:, 1].max()) >= n:
            raise EncodingError("assignment col out of range")
        increasing = (rows[1:] > rows[:-1]) | ((rows[1:] == rows[:-1]) & (cols[1:] > cols[:-1]))
        if not bool(np.all(increasing)):
            raise EncodingError("assignment pairs must be strictly increasing row-major")
    return m, n, rows, cols


# --- JSONL / manifests -------------------------------------------------------

def write_jsonl(path: str | Path, records: list[dict]) -> None:
    lines = [json.dumps(rec, sort_keys=True, separators=(",", ":")) for rec in records]
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing file: {path}")
    records = []
    for line_no, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise EncodingError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return records


def write_json(path: str | Path, payload: dict) -> None:
    _atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing file: {path}")
    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise EncodingError(f"{path}: invalid JSON ({exc})") from exc


# --- pair records ------------------------------------------------------------

def write_pairs(path: str | Path, pairs) -> None:
    from .pairing import PairRecord  # local import to avoid cycle at import time

    records = [
        {
            "image_id": p.image_id,
            "segment_index": p.segment_index,
            "phrase": p.phrase,
            "root": p.root,
            "score": p.cross_modal_score,
            "source": p.source,
        }
        for p in pairs
    ]
    write_jsonl(path, records)


def read_pairs(path: str | Path):
    from .pairing import PairRecord

    pairs = []
    for rec in read_jsonl(path):
        try:
            pairs.append(
                PairRecord(
                    image_id=rec["image_id"],
                    segment_index=int(rec["segment_index"]),
                    phrase=rec["phrase"],
                    root=rec["root"],
                    cross_modal_score=float(rec["score"]),
                    source=rec.get("source", "paired"),
                )
            )
        except KeyError as exc:
            raise EncodingError(f"{path}: pair record missing key {exc}") from exc
    return pairs


# --- text lexicon ------------------------------------------------------------

@dataclass
class TextLexicon:
    """Term -> unit embedding store (EMB1 matrix + jsonl sidecar of terms)."""

    terms: list[str]
    matrix: EmbeddingMatrix

    def __post_init__(self):
        if len(self.terms) != self.matrix.rows:
            raise InvalidInputError(
                f"{len(self.terms)} terms but {self.matrix.rows} embedding rows"
            )
        self._index = {t: i for i, t in enumerate(self.terms)}
        if len(self._index) != len(self.terms):
            raise InvalidInputError("lexicon terms must be unique")

    def __contains__(self, term: str) -> bool:
        return term in self._index

    def __getitem__(self, term: str) -> np.ndarray:
        return self.matrix.data[self._index[term]]

    def __len__(self) -> int:
        return len(self.terms)

    def get(self, term: str, default=None):
        idx = self._index.get(term)
        return default if idx is None else self.matrix.data[idx]

    def subset(self, terms) -> dict:
        return {t: self[t] for t in terms if t in self}


def save_lexicon(stem: str | Path, lexicon: TextLexicon) -> None:
    stem = Path(stem)
    write_embeddings(stem.with_suffix(".emb"), lexicon.matrix)
    write_jsonl(
        stem.with_suffix(".jsonl"),
        [{"id": i, "text": t} for i, t in enumerate(lexicon.terms)],
    )


def load_lexicon(stem: str | Path) -> TextLexicon:
    stem = Path(stem)
    matrix = read_embeddings(stem.with_suffix(".emb"))
    records = read_jsonl(stem.with_suffix(".jsonl"))
    terms = [""] * len(records)
    for rec in records:
        try:
            idx, text = int(rec["id"]), rec["text"]
        except KeyError as exc:
            raise EncodingError(f"lexicon record missing key {exc}") from exc
        if not 0 <= idx < len(records):
            raise EncodingError(f"lexicon id {idx} out of range")
        terms[idx] = text
    if len(records) != matrix.rows:
        raise ManifestMismatchError(
            f"lexicon has {len(records)} terms but {matrix.rows} embedding rows"
        )
    return TextLexicon(terms=terms, matrix=matrix)


# --- reference set persistence ----------------------------------------------

_REFSET_FILES = ("segments.emb", "labels.emb", "assignments.asg", "labels.jsonl", "manifest.json")


def save_reference_set(
    ref: ReferenceSet, directory: str | Path, enhancement: dict | None = None
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_embeddings(directory / "segments.emb", ref.s_ref)
    write_embeddings(directory / "labels.emb", ref.l_ref)
    write_assignments(
        directory / "assignments.asg",
        ref.num_segments,
        ref.num_labels,
        ref.assign_rows,
        ref.assign_cols,
    )
    write_jsonl(
        directory / "labels.jsonl",
        [
            {"id": info.id, "phrase": info.phrase, "root": info.root, "source": info.source}
            for info in ref.labels
        ],
    )
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": {"visual": ref.s_ref.dim, "text": ref.l_ref.dim},
        "counts": {
            "segments": ref.num_segments,
            "labels": ref.num_labels,
            "pairs": ref.num_pairs,
        },
        "encoders": ref.fingerprints,
        "enhancement": enhancement or {},
    }
    write_json(directory / "manifest.json", manifest)


def load_reference_set(directory: str | Path) -> ReferenceSet:
    directory = Path(directory)
    for name in _REFSET_FILES:
        if not (directory / name).exists():
            raise FormatError(f"reference set is missing {name}")
    manifest = read_json(directory / "manifest.json")
    s_ref = read_embeddings(directory / "segments.emb")
    l_ref = read_embeddings(directory / "labels.emb")
    m, n, rows, cols = read_assignments(directory / "assignments.asg")

    dims = manifest.get("dims", {})
    counts = manifest.get("counts", {})
    if dims.get("visual") != s_ref.dim or dims.get("text") != l_ref.dim:
        raise ManifestMismatchError("manifest dims disagree with embedding files")
    if (
        counts.get("segments") != s_ref.rows
        or counts.get("labels") != l_ref.rows
        or counts.get("pairs") != int(rows.size)
    ):
        raise ManifestMismatchError("manifest counts disagree with files")
    if m != s_ref.rows or n != l_ref.rows:
        raise ManifestMismatchError("assignment shape disagrees with embeddings")
    if not s_ref.normalized or not l_ref.normalized:
        raise EncodingError("reference embeddings must be L2-normalized")

    labels = []
    for rec in read_jsonl(directory / "labels.jsonl"):
        try:
            labels.append(
                LabelInfo(
                    id=int(rec["id"]),
                    phrase=rec["phrase"],
                    root=rec["root"],
                    source=rec.get("source", "paired"),
                )
            )
        except KeyError as exc:
            raise EncodingError(f"labels.jsonl record missing key {exc}") from exc
    if [info.id for info in labels] != list(range(n)):
        raise EncodingError("labels.jsonl ids must be exactly 0..n-1 in order")

    try:
        return ReferenceSet(
            s_ref=s_ref,
            l_ref=l_ref,
            assign_rows=rows,
            assign_cols=cols,
            labels=labels,
            fingerprints=dict(manifest.get("encoders", {})),
        )
    except (OrphanSegmentError, OrphanLabelError) as exc:
        raise OrphanRowOrColumnError(str(exc)) from exc


# --- images and colormaps -----------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/PPM raster as uint8 (h, w) grayscale or (h, w, 3) RGB."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def class_color(class_id: int) -> tuple[int, int, int]:
    """Deterministic palette: golden-angle hue walk, ignore maps to black."""
    if class_id == IGNORE_ID:
        return (0, 0, 0)
    hue = (class_id * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255))


def write_colormap_png(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids, dtype=np.uint32)
    present = np.unique(ids)
    rgb = np.zeros((*ids.shape, 3), dtype=np.uint8)
    for value in present:
        rgb[ids == value] = class_color(int(value))
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    Image.fromarray(rgb).save(tmp, format="PNG")
    os.replace(tmp, path)


def sniff_magic(path: str | Path) -> bytes | None:
    """First four bytes if they match a known container magic."""
    try:
        head = Path(path).open("rb").read(4)
    except OSError:
        return None
    return head if head in _KNOWN_MAGICS else None
