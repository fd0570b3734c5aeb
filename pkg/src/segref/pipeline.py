"""File-based pipeline stages.

Every stage reads and writes only the declared container formats, so the
pipeline is resumable and each stage is independently testable. Re-running a
stage on identical inputs produces bit-identical outputs for any thread
count: parallelism is per-image with results assembled in input order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import EmbeddingMatrix
from .enhance import FilterStrategy, StrategyKind, enhance_pairs
from .errors import (
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    LexiconMissError,
    ManifestMismatchError,
    ShapeMismatchError,
)
from .formats import (
    load_image,
    load_lexicon,
    load_reference_set,
    read_assignments,
    read_embeddings,
    read_feature_map,
    read_json,
    read_jsonl,
    read_mask_raster,
    read_mask_stack,
    read_pairs,
    save_reference_set,
    sniff_magic,
    write_colormap_png,
    write_embeddings,
    write_feature_map,
    write_json,
    write_mask_raster,
    write_pairs,
)
from .metrics import ConfusionMatrix, accumulate, miou
from .pairing import ImageBundle, extract_noun_phrases, pair_labels_to_segments
from .pooling import downscale_mask, mask_average_pool
from .retrieval import (
    RetrievalConfig,
    affinity_a1,
    affinity_a2,
    aggregate_pixels,
    build_reference_set,
    class_embeddings_from_lexicon,
    segment_logits,
)
from .segmenter import IGNORE_ID, SegmentMaskSet, felzenszwalb_segment
from .synth import SynthSpec, generate, write_world

THREADS_ENV = "SEGREF_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class PipelineConfig:
    """Tunable knobs with their paper-faithful defaults."""

    delta_filter: float = 30.0
    k_sim: int = 30
    strategy: str = StrategyKind.GROUP_INTRA_MODAL.value
    prune_ambiguous: bool = True
    center_strategy: str = "median"
    temperature_a1: float = 1.0
    temperature_a2: float = 1.0
    top_k_candidates: int | None = None
    scale_k: float = 100.0
    sigma: float = 0.8
    min_size: int = 20

    def validate(self) -> None:
        problems = []
        if not 0.0 <= self.delta_filter <= 100.0:
            problems.append(f"delta_filter must be in [0, 100], got {self.delta_filter}")
        if self.k_sim < 0:
            problems.append(f"k_sim must be >= 0, got {self.k_sim}")
        if self.strategy not in {k.value for k in StrategyKind}:
            valid = ", ".join(sorted(k.value for k in StrategyKind))
            problems.append(f"strategy must be one of {valid}, got {self.strategy!r}")
        if self.center_strategy not in ("median", "medoid"):
            problems.append(f"center_strategy must be median or medoid, got {self.center_strategy!r}")
        if self.temperature_a1 <= 0 or self.temperature_a2 <= 0:
            problems.append("temperatures must be > 0")
        if self.top_k_candidates is not None and self.top_k_candidates < 1:
            problems.append("top_k_candidates must be >= 1 when set")
        if self.scale_k <= 0:
            problems.append(f"scale_k must be > 0, got {self.scale_k}")
        if self.sigma < 0:
            problems.append(f"sigma must be >= 0, got {self.sigma}")
        if self.min_size < 1:
            problems.append(f"min_size must be >= 1, got {self.min_size}")
        if problems:
            raise InvalidConfigError("; ".join(problems))

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "PipelineConfig":
        payload = read_json(path)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**payload, **(overrides or {})}
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(
            temperature_a1=self.temperature_a1,
            temperature_a2=self.temperature_a2,
            top_k_candidates=self.top_k_candidates,
        )

    def filter_strategy(self) -> FilterStrategy:
        return FilterStrategy(kind=StrategyKind(self.strategy), delta_filter=self.delta_filter)


# --- ingest helpers ----------------------------------------------------------

def _ingest_manifest(ingest: Path) -> dict:
    return read_json(ingest / "manifest.json")


def _phrases_by_image(ingest: Path) -> dict[str, list[str]] | None:
    path = ingest / "phrases.jsonl"
    if not path.exists():
        return None
    out = {}
    for rec in read_jsonl(path):
        out[rec["image_id"]] = list(rec["phrases"])
    return out


def _descriptions_by_image(ingest: Path) -> dict[str, str]:
    path = ingest / "descriptions.jsonl"
    if not path.exists():
        raise FormatError(f"ingest has neither phrases.jsonl nor descriptions.jsonl: {ingest}")
    return {rec["image_id"]: rec["description"] for rec in read_jsonl(path)}


def _visual_embeddings(ingest: Path, image_id: str) -> EmbeddingMatrix:
    """Enhancement/retrieval-space segment embeddings for one image."""
    vis = ingest / "embeddings" / f"{image_id}.vis.emb"
    if vis.exists():
        return read_embeddings(vis)
    return read_embeddings(ingest / "embeddings" / f"{image_id}.seg.emb")


# --- stages -------------------------------------------------------------------

def stage_pair(ingest_dir: str | Path, out_path: str | Path, threads: int = 1) -> int:
    """Pair phrases with segments for every ingest image; returns pair count."""
    ingest = Path(ingest_dir)
    manifest = _ingest_manifest(ingest)
    image_ids = manifest["images"]
    phrase_map = _phrases_by_image(ingest)
    pair_lexicon = None
    if phrase_map is None:
        descriptions = _descriptions_by_image(ingest)
        phrase_map = {img: extract_noun_phrases(descriptions[img]) for img in image_ids}
        stem = ingest / "pair_lexicon"
        if not stem.with_suffix(".emb").exists():
            raise FormatError(
                "phrase extraction from descriptions needs a pairing-space lexicon "
                f"(missing {stem}.emb)"
            )
        pair_lexicon = load_lexicon(stem)

    def run(image_id: str):
        seg = read_embeddings(ingest / "embeddings" / f"{image_id}.seg.emb")
        phrases = phrase_map.get(image_id, [])
        if pair_lexicon is None:
            phr = read_embeddings(ingest / "embeddings" / f"{image_id}.phr.emb")
        else:
            missing = [p for p in phrases if p not in pair_lexicon]
            if missing:
                raise LexiconMissError(set(missing))
            rows = (
                np.stack([pair_lexicon[p] for p in phrases])
                if phrases
                else np.zeros((0, seg.dim), dtype=np.float32)
            )
            phr = EmbeddingMatrix(rows, normalized=True)
        bundle = ImageBundle(
            image_id=image_id,
            segment_embeddings=seg,
            phrases=phrases,
            phrase_embeddings=phr,
        )
        return pair_labels_to_segments(bundle)

    per_image = _map_ordered(run, image_ids, threads)
    pairs = [p for chunk in per_image for p in chunk]
    write_pairs(out_path, pairs)
    return len(pairs)


def _per_pair_visual_matrix(ingest: Path, pairs) -> EmbeddingMatrix:
    cache: dict[str, EmbeddingMatrix] = {}
    rows = []
    for pair in pairs:
        if pair.image_id not in cache:
            cache[pair.image_id] = _visual_embeddings(ingest, pair.image_id)
        emb = cache[pair.image_id]
        if pair.segment_index >= emb.rows:
            raise InvalidInputError(
                f"{pair.image_id}: segment index {pair.segment_index} out of range"
            )
        rows.append(emb.data[pair.segment_index])
    return EmbeddingMatrix.from_rows(rows, normalized=True)


def stage_enhance(
    ingest_dir: str | Path,
    pairs_path: str | Path,
    out_path: str | Path,
    report_path: str | Path,
    cfg: PipelineConfig,
) -> dict:
    """Prune, filter, and enrich the paired set; returns the report dict."""
    ingest = Path(ingest_dir)
    pairs = read_pairs(pairs_path)
    vis = _per_pair_visual_matrix(ingest, pairs)
    root_vectors = None
    if cfg.k_sim > 0:
        lexicon = load_lexicon(ingest / "text_lexicon")
        roots = sorted({p.root for p in pairs})
        root_vectors = {r: lexicon[r] for r in roots if r in lexicon}
    enhanced, _, report = enhance_pairs(
        pairs,
        vis,
        cfg.filter_strategy(),
        cfg.k_sim,
        root_vectors=root_vectors,
        prune=cfg.prune_ambiguous,
        center_strategy=cfg.center_strategy,
    )
    write_pairs(out_path, enhanced)
    payload = report.to_dict()
    write_json(report_path, payload)
    return payload


def stage_build_ref(
    ingest_dir: str | Path,
    pairs_path: str | Path,
    out_dir: str | Path,
    cfg: PipelineConfig,
) -> dict:
    """Encode enhanced pairs as a persisted reference set; returns counts."""
    ingest = Path(ingest_dir)
    pairs = read_pairs(pairs_path)
    lexicon = load_lexicon(ingest / "text_lexicon")
    segment_vectors: dict[tuple[str, int], np.ndarray] = {}
    cache: dict[str, EmbeddingMatrix] = {}
    for pair in pairs:
        key = (pair.image_id, pair.segment_index)
        if key in segment_vectors:
            continue
        if pair.image_id not in cache:
            cache[pair.image_id] = _visual_embeddings(ingest, pair.image_id)
        emb = cache[pair.image_id]
        if pair.segment_index >= emb.rows:
            raise InvalidInputError(
                f"{pair.image_id}: segment index {pair.segment_index} out of range"
            )
        segment_vectors[key] = emb.data[pair.segment_index]

    manifest = _ingest_manifest(ingest)
    encoders = manifest.get("encoders", {})
    fingerprints = {
        "visual": encoders.get("visual", "unknown"),
        "text": encoders.get("text", "unknown"),
    }
    ref = build_reference_set(pairs, segment_vectors, lexicon, fingerprints)
    save_reference_set(
        ref,
        out_dir,
        enhancement={
            "delta_filter": cfg.delta_filter,
            "k_sim": cfg.k_sim,
            "strategy": cfg.strategy,
        },
    )
    return {
        "segments": ref.num_segments,
        "labels": ref.num_labels,
        "pairs": ref.num_pairs,
    }


def stage_segment(
    image_paths: list[str | Path],
    out_dir: str | Path,
    cfg: PipelineConfig,
    threads: int = 1,
) -> list[int]:
    """Segment images into superpixel partitions; returns per-image k."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(path) -> int:
        img = load_image(path)
        masks = felzenszwalb_segment(
            img, scale_k=cfg.scale_k, sigma=cfg.sigma, min_size=cfg.min_size
        )
        write_mask_raster(out / (Path(path).stem + ".msk"), masks.partition, masks.k)
        return masks.k

    return _map_ordered(run, [Path(p) for p in image_paths], threads)


def _load_masks(path_stem: Path) -> SegmentMaskSet:
    msk = path_stem.with_suffix(".msk")
    msks = path_stem.with_suffix(".msks")
    if msk.exists():
        ids, k = read_mask_raster(msk)
        return SegmentMaskSet.from_partition(ids, k=k, allow_ignore=True)
    if msks.exists():
        return SegmentMaskSet.from_stack(read_mask_stack(msks))
    raise FormatError(f"no mask file for {path_stem.name} (.msk or .msks)")


def stage_pool(
    features_dir: str | Path,
    masks_dir: str | Path,
    out_dir: str | Path,
    threads: int = 1,
) -> list[str]:
    """Mask-average-pool feature maps into per-segment embeddings."""
    features = sorted(Path(features_dir).glob("*.fmp"))
    if not features:
        raise FormatError(f"no .fmp files in {features_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(fmp_path: Path) -> str:
        feat = read_feature_map(fmp_path)
        masks = _load_masks(Path(masks_dir) / fmp_path.stem)
        gh, gw = feat.shape[:2]
        rows = []
        for i in range(masks.k):
            weights = downscale_mask(masks.mask(i), gh, gw)
            rows.append(mask_average_pool(feat, weights))
        matrix = EmbeddingMatrix.from_rows(rows, normalized=True)
        write_embeddings(out / (fmp_path.stem + ".emb"), matrix)
        return fmp_path.stem

    return _map_ordered(run, features, threads)


def _check_encoder_match(ref_fp: dict, test_fp: dict) -> None:
    for key in ("visual", "text"):
        a, b = ref_fp.get(key), test_fp.get(key)
        if a and b and a != b:
            raise ManifestMismatchError(
                f"{key} encoder mismatch: reference={a!r} test={b!r}"
            )


def stage_retrieve(
    refset_dir: str | Path,
    test_dir: str | Path,
    out_dir: str | Path,
    cfg: PipelineConfig,
    threads: int = 1,
    write_probs: bool = False,
    write_png: bool = False,
) -> list[str]:
    """Predict class rasters for every test image; returns processed ids."""
    ref = load_reference_set(refset_dir)
    test = Path(test_dir)
    manifest = read_json(test / "manifest.json")
    _check_encoder_match(ref.fingerprints, manifest.get("encoders", {}))

    classes_path = test / "classes.txt"
    if not classes_path.exists():
        raise FormatError(f"missing {classes_path}")
    class_names = [line for line in classes_path.read_text("utf-8").splitlines() if line]
    override = test / "class_embeddings.emb"
    if override.exists():
        l_test = read_embeddings(override)
        if l_test.rows != len(class_names):
            raise ManifestMismatchError(
                f"class_embeddings.emb has {l_test.rows} rows for {len(class_names)} classes"
            )
    else:
        lexicon = load_lexicon(test / "text_lexicon")
        l_test = class_embeddings_from_lexicon(class_names, lexicon)

    rcfg = cfg.retrieval()
    a2 = affinity_a2(ref, l_test, rcfg)
    image_ids = manifest["images"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(image_id: str) -> str:
        s_test = read_embeddings(test / "embeddings" / f"{image_id}.emb")
        masks = _load_masks(test / "masks" / image_id)
        if s_test.rows != masks.k:
            raise ShapeMismatchError(
                f"{image_id}: {s_test.rows} segment embeddings for {masks.k} masks"
            )
        a1 = affinity_a1(s_test, ref, rcfg)
        p_seg = segment_logits(a1, a2)
        pred = aggregate_pixels(p_seg, masks)
        write_mask_raster(out / f"{image_id}.msk", pred.label_map, len(class_names))
        if write_probs:
            write_feature_map(out / f"{image_id}.fmp", pred.p_test)
        if write_png:
            write_colormap_png(out / f"{image_id}.png", pred.label_map)
        return image_id

    return _map_ordered(run, image_ids, threads)


def stage_eval(
    pred_dir: str | Path,
    gt_dir: str | Path,
    out_path: str | Path | None = None,
    threads: int = 1,
) -> dict:
    """Accumulate confusion counts over all rasters and compute mIoU."""
    gt_files = sorted(Path(gt_dir).glob("*.msk"))
    if not gt_files:
        raise FormatError(f"no .msk files in {gt_dir}")
    first_gt, num_classes = read_mask_raster(gt_files[0])

    def run(gt_path: Path) -> ConfusionMatrix:
        gt, k_gt = read_mask_raster(gt_path)
        if k_gt != num_classes:
            raise ManifestMismatchError(
                f"{gt_path.name}: {k_gt} classes, expected {num_classes}"
            )
        pred_path = Path(pred_dir) / gt_path.name
        if not pred_path.exists():
            raise FormatError(f"missing prediction for {gt_path.name}")
        pred, k_pred = read_mask_raster(pred_path)
        if k_pred != num_classes:
            raise ManifestMismatchError(
                f"{pred_path.name}: {k_pred} classes, expected {num_classes}"
            )
        conf = ConfusionMatrix.zeros(num_classes)
        return accumulate(conf, pred, gt, ignore_value=IGNORE_ID)

    partials = _map_ordered(run, gt_files, threads)
    total = ConfusionMatrix.zeros(num_classes)
    for part in partials:
        total.merge(part)
    mean, per_class = miou(total)
    result = {
        "num_classes": num_classes,
        "images": len(gt_files),
        "miou": mean,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
    }
    if out_path is not None:
        write_json(out_path, result)
    return result


def stage_synth(spec: SynthSpec, out_dir: str | Path) -> dict:
    world = generate(spec)
    write_world(world, out_dir)
    return {
        "images": len(world.bundles),
        "concepts": len(world.concepts),
        "test_images": len(world.test_images),
        "planted_outliers": len(world.outliers),
        "lexicon_terms": len(world.lexicon),
    }


def stage_render(msk_path: str | Path, out_png: str | Path) -> None:
    ids, _ = read_mask_raster(msk_path)
    write_colormap_png(out_png, ids)


# --- inspect ------------------------------------------------------------------

def _inspect_embeddings(path: Path) -> dict:
    emb = read_embeddings(path)
    norms = np.linalg.norm(emb.data.astype(np.float64), axis=1)
    return {
        "format": "EMB1",
        "rows": emb.rows,
        "dim": emb.dim,
        "normalized": emb.normalized,
        "norm_min": float(norms.min()) if emb.rows else None,
        "norm_max": float(norms.max()) if emb.rows else None,
    }


def _inspect_pairs_file(path: Path) -> dict:
    pairs = read_pairs(path)
    by_source: dict[str, int] = {}
    roots: set[str] = set()
    for pair in pairs:
        by_source[pair.source] = by_source.get(pair.source, 0) + 1
        roots.add(pair.root)
    info = {
        "format": "pairs.jsonl",
        "pairs": len(pairs),
        "distinct_roots": len(roots),
        "by_source": by_source,
    }
    report_path = path.with_name(path.stem + ".report.json")
    if report_path.exists():
        report = read_json(report_path)
        consistent = report.get("output_pairs") == len(pairs) and (
            report.get("enrich", {}).get("pairs_added") == by_source.get("enriched", 0)
        )
        info["report"] = {"path": report_path.name, "counts_match": bool(consistent)}
        if not consistent:
            raise ManifestMismatchError(
                f"{path.name}: counts disagree with {report_path.name}"
            )
    return info


def stage_inspect(path: str | Path) -> dict:
    """Validate any produced artifact and summarize it."""
    path = Path(path)
    if path.is_dir():
        if (path / "segments.emb").exists():
            ref = load_reference_set(path)
            return {
                "format": "reference-set",
                "segments": ref.num_segments,
                "labels": ref.num_labels,
                "pairs": ref.num_pairs,
                "dims": {"visual": ref.s_ref.dim, "text": ref.l_ref.dim},
                "encoders": ref.fingerprints,
            }
        if (path / "manifest.json").exists():
            manifest = read_json(path / "manifest.json")
            images = manifest.get("images", [])
            checked = 0
            for image_id in images:
                for suffix in (".seg.emb", ".phr.emb", ".vis.emb", ".emb"):
                    candidate = path / "embeddings" / f"{image_id}{suffix}"
                    if candidate.exists():
                        read_embeddings(candidate)
                        checked += 1
                for sub in ("masks", "gt"):
                    candidate = path / sub / f"{image_id}.msk"
                    if candidate.exists():
                        read_mask_raster(candidate)
                        checked += 1
            if (path / "text_lexicon.emb").exists():
                load_lexicon(path / "text_lexicon")
            return {"format": "ingest-dir", "images": len(images), "files_validated": checked}
        subdirs = [p.name for p in path.iterdir() if p.is_dir()]
        if {"ingest", "test"} <= set(subdirs):
            report = {"format": "world-dir"}
            report["ingest"] = stage_inspect(path / "ingest")
            report["test"] = stage_inspect(path / "test")
            return report
        raise FormatError(f"unrecognized directory layout: {path}")

    if not path.exists():
        raise FormatError(f"no such file: {path}")
    if path.suffix == ".jsonl":
        if path.name.endswith("text_lexicon.jsonl") or path.with_suffix(".emb").exists():
            lex = load_lexicon(path.with_suffix(""))
            return {"format": "lexicon", "terms": len(lex), "dim": lex.matrix.dim}
        return _inspect_pairs_file(path)
    if path.suffix == ".json":
        return {"format": "json", "keys": sorted(read_json(path))}

    magic = sniff_magic(path)
    if magic == b"EMB1":
        return _inspect_embeddings(path)
    if magic == b"FMP1":
        feat = read_feature_map(path)
        return {"format": "FMP1", "grid": list(feat.shape[:2]), "dim": feat.shape[2]}
    if magic == b"MSK1":
        ids, k = read_mask_raster(path)
        covered = ids != np.uint32(IGNORE_ID)
        present = np.unique(ids[covered])
        return {
            "format": "MSK1",
            "h": ids.shape[0],
            "w": ids.shape[1],
            "k": k,
            "ids_present": int(present.size),
            "ignored_pixels": int((~covered).sum()),
        }
    if magic == b"MSKS":
        stack = read_mask_stack(path)
        return {
            "format": "MSKS",
            "k": stack.shape[0],
            "h": stack.shape[1],
            "w": stack.shape[2],
            "covered_pixels": int(stack.any(axis=0).sum()),
        }
    if magic == b"ASG1":
        m, n, rows, _ = read_assignments(path)
        return {"format": "ASG1", "m": m, "n": n, "nnz": int(rows.size)}
    raise FormatError(f"unrecognized file type: {path}")
