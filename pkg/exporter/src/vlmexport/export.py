"""Export routines producing the engine's ingest directory layout.

The exporter never implements pipeline math beyond mask average pooling
(which it needs to turn feature maps into per-segment embeddings); its job
is to run encoders and emit files the engine validates. Per-image model
failures are surfaced in the run summary and the batch continues.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import DESCRIBE_PROMPT, BackendError
from .wire import (
    WireError,
    atomic_write,
    load_masks,
    write_embeddings,
    write_feature_map,
    write_json,
    write_jsonl,
)


@dataclass
class ExportManifest:
    """What produced the files: encoder identities, prompt, dims, paths."""

    visual_encoder: str
    text_encoder: str
    describer: str | None = None
    prompt: str = DESCRIBE_PROMPT
    dims: dict = field(default_factory=dict)
    images: list[str] = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        payload = {
            "format_version": 1,
            "encoders": {"visual": self.visual_encoder, "text": self.text_encoder},
            "dims": self.dims,
            "images": self.images,
        }
        if self.describer:
            payload["describer"] = {"id": self.describer, "prompt": self.prompt}
        if self.failures:
            payload["failures"] = self.failures
        return payload


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def list_images(images_dir: str | Path) -> list[Path]:
    """PNG/PPM files in the directory; an empty list is a valid (empty) job."""
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise WireError(f"not a directory: {images_dir}")
    return sorted(p for p in images_dir.iterdir() if p.suffix.lower() in (".png", ".ppm"))


def area_weights(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Fraction of each patch covered by the mask (exact area overlap)."""
    h, w = mask.shape

    def box_area(y0, y1, x0, x1):
        total = 0.0
        for py in range(int(np.floor(y0)), int(np.ceil(y1))):
            fy = min(y1, py + 1) - max(y0, py)
            for px in range(int(np.floor(x0)), int(np.ceil(x1))):
                if mask[py, px]:
                    total += fy * (min(x1, px + 1) - max(x0, px))
        return total

    out = np.zeros((grid_h, grid_w))
    for p in range(grid_h):
        for q in range(grid_w):
            y0, y1 = p * h / grid_h, (p + 1) * h / grid_h
            x0, x1 = q * w / grid_w, (q + 1) * w / grid_w
            out[p, q] = box_area(y0, y1, x0, x1) / ((y1 - y0) * (x1 - x0))
    return out


def pool_segment(feat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask average pooling: weighted feature mean under the downscaled mask."""
    weights = area_weights(mask, feat.shape[0], feat.shape[1])
    total = weights.sum()
    if total <= 1e-9:
        raise BackendError("segment mask vanishes on the feature grid")
    pooled = np.einsum("hw,hwd->d", weights, feat.astype(np.float64)) / total
    norm = np.linalg.norm(pooled)
    if norm <= 1e-12:
        raise BackendError("segment pools to a zero vector")
    return (pooled / norm).astype(np.float32)


def _for_each_image(paths, fn, threads: int, failures: dict):
    def guarded(path):
        try:
            return path.stem, fn(path)
        except (BackendError, WireError, OSError) as exc:
            failures[path.stem] = f"{type(exc).__name__}: {exc}"
            return path.stem, None

    if threads <= 1:
        return [guarded(p) for p in paths]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(guarded, paths))


def export_descriptions(
    backend, images_dir: str | Path, out_dir: str | Path, threads: int = 1
) -> ExportManifest:
    """descriptions.jsonl for every image; failures recorded, run continues."""
    out = Path(out_dir)
    paths = list_images(images_dir)
    manifest = ExportManifest(
        visual_encoder=backend.visual_fingerprint,
        text_encoder=backend.text_fingerprint,
        describer=getattr(backend, "describer_fingerprint", "external"),
    )
    records = []
    results = _for_each_image(
        paths,
        lambda p: backend.describe(load_image(p), p.stem),
        threads,
        manifest.failures,
    )
    for stem, description in results:
        if description is not None:
            records.append({"image_id": stem, "description": description})
            manifest.images.append(stem)
    write_jsonl(out / "descriptions.jsonl", records)
    return manifest


def export_feature_maps(
    backend, images_dir: str | Path, out_dir: str | Path, threads: int = 1
) -> ExportManifest:
    """features/<id>.fmp for every image."""
    out = Path(out_dir)
    paths = list_images(images_dir)
    manifest = ExportManifest(
        visual_encoder=backend.visual_fingerprint,
        text_encoder=backend.text_fingerprint,
    )

    def run(path):
        feat = backend.feature_map(load_image(path))
        write_feature_map(out / "features" / f"{path.stem}.fmp", feat)
        return feat.shape

    for stem, shape in _for_each_image(paths, run, threads, manifest.failures):
        if shape is not None:
            manifest.images.append(stem)
            manifest.dims["visual"] = int(shape[2])
    return manifest


def export_text_embeddings(
    backend, terms: list[str], out_stem: str | Path
) -> ExportManifest:
    """A text lexicon: <stem>.emb plus the aligned <stem>.jsonl of terms."""
    unique = list(dict.fromkeys(terms))
    matrix = backend.embed_text(unique)
    out_stem = Path(out_stem)
    write_embeddings(out_stem.with_suffix(".emb"), matrix)
    write_jsonl(
        out_stem.with_suffix(".jsonl"),
        [{"id": i, "text": t} for i, t in enumerate(unique)],
    )
    manifest = ExportManifest(
        visual_encoder=backend.visual_fingerprint,
        text_encoder=backend.text_fingerprint,
        dims={"text": int(matrix.shape[1])},
    )
    manifest.images = []
    return manifest


def export_segment_embeddings(
    backend,
    images_dir: str | Path,
    masks_dir: str | Path,
    out_dir: str | Path,
    threads: int = 1,
) -> ExportManifest:
    """embeddings/<id>.seg.emb and .vis.emb via encoder-side mask pooling."""
    out = Path(out_dir)
    paths = list_images(images_dir)
    manifest = ExportManifest(
        visual_encoder=backend.visual_fingerprint,
        text_encoder=backend.text_fingerprint,
    )

    def run(path):
        feat = backend.feature_map(load_image(path))
        masks = load_masks(Path(masks_dir) / path.stem)
        rows = [pool_segment(feat, mask) for mask in masks]
        matrix = np.stack(rows) if rows else np.zeros((0, feat.shape[2]), dtype=np.float32)
        write_embeddings(out / "embeddings" / f"{path.stem}.seg.emb", matrix)
        write_embeddings(out / "embeddings" / f"{path.stem}.vis.emb", matrix)
        return matrix.shape

    for stem, shape in _for_each_image(paths, run, threads, manifest.failures):
        if shape is not None:
            manifest.images.append(stem)
            manifest.dims["visual"] = int(shape[1])
    return manifest


def export_ingest(
    backend,
    images_dir: str | Path,
    masks_dir: str | Path,
    out_dir: str | Path,
    phrases_by_image: dict[str, list[str]] | None = None,
    threads: int = 1,
) -> ExportManifest:
    """Full self-contained ingest directory.

    Emits descriptions, features, segment embeddings, per-image phrase
    embeddings (when phrases are given), the manifest, and copies of the
    source images and masks so the directory matches the engine's ingest
    layout on its own.
    """
    out = Path(out_dir)
    described = export_descriptions(backend, images_dir, out, threads)
    feats = export_feature_maps(backend, images_dir, out, threads)
    segs = export_segment_embeddings(backend, images_dir, masks_dir, out, threads)

    for image_path in list_images(images_dir):
        atomic_write(out / "images" / image_path.name, image_path.read_bytes())
        for suffix in (".msk", ".msks"):
            mask_path = Path(masks_dir) / (image_path.stem + suffix)
            if mask_path.exists():
                atomic_write(out / "masks" / mask_path.name, mask_path.read_bytes())

    if phrases_by_image:
        write_jsonl(
            out / "phrases.jsonl",
            [
                {"image_id": image_id, "phrases": phrases}
                for image_id, phrases in sorted(phrases_by_image.items())
            ],
        )
        for image_id, phrases in sorted(phrases_by_image.items()):
            matrix = (
                backend.embed_text(phrases)
                if phrases
                else np.zeros((0, backend.text_dim), dtype=np.float32)
            )
            write_embeddings(out / "embeddings" / f"{image_id}.phr.emb", matrix)

    manifest = ExportManifest(
        visual_encoder=backend.visual_fingerprint,
        text_encoder=backend.text_fingerprint,
        describer=described.describer,
        dims={
            "visual": segs.dims.get("visual"),
            "pair": segs.dims.get("visual"),
            "text": getattr(backend, "text_dim", None),
        },
        images=sorted(set(described.images) & set(feats.images) & set(segs.images)),
        failures={**described.failures, **feats.failures, **segs.failures},
    )
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest
