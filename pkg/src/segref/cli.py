"""Command-line frontend.

Subcommands map one-to-one onto the file-based pipeline stages; every
subcommand validates its configuration before any work starts, writes only
the declared formats, and exits 0 on success or 1 with a typed error
message. ``--threads`` (or the SEGREF_THREADS environment variable) controls
worker count without changing any output byte.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import SegrefError
from .pipeline import (
    PipelineConfig,
    default_threads,
    stage_build_ref,
    stage_enhance,
    stage_eval,
    stage_inspect,
    stage_pair,
    stage_pool,
    stage_render,
    stage_retrieve,
    stage_segment,
    stage_synth,
)
from .synth import SynthSpec

_CONFIG_KEYS = (
    "delta_filter",
    "k_sim",
    "strategy",
    "prune_ambiguous",
    "center_strategy",
    "temperature_a1",
    "temperature_a2",
    "top_k_candidates",
    "scale_k",
    "sigma",
    "min_size",
)


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_file(args.config, overrides)
    else:
        cfg = PipelineConfig(**overrides)
    cfg.validate()
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: env SEGREF_THREADS or 1)")
    parser.add_argument("--config", default=None, help="JSON config file with pipeline defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segref", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding world")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concepts", type=int, default=6)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--samples", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--misalignment-rate", type=float, default=0.2)
    p.add_argument("--ambient-rate", type=float, default=0.0)
    p.add_argument("--alias-rate", type=float, default=0.0)
    p.add_argument("--test-images", type=int, default=6)
    p.add_argument("--test-size", type=int, default=24)

    p = sub.add_parser("pair", help="pair phrases with segments")
    _add_common(p)
    p.add_argument("--ingest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("enhance", help="prune, filter, and enrich paired data")
    _add_common(p)
    p.add_argument("--ingest", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="report path (default: <out stem>.report.json)")
    p.add_argument("--delta-filter", dest="delta_filter", type=float, default=None)
    p.add_argument("--k-sim", dest="k_sim", type=int, default=None)
    p.add_argument(
        "--strategy",
        default=None,
        choices=["global-cross", "group-cross", "group-intra", "group-intra-weighted"],
    )
    p.add_argument("--center", dest="center_strategy", default=None, choices=["median", "medoid"])
    p.add_argument(
        "--no-prune",
        dest="prune_ambiguous",
        action="store_const",
        const=False,
        default=None,
        help="skip ambiguous-label knee pruning",
    )

    p = sub.add_parser("build-ref", help="encode enhanced pairs as a reference set")
    _add_common(p)
    p.add_argument("--ingest", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta-filter", dest="delta_filter", type=float, default=None)
    p.add_argument("--k-sim", dest="k_sim", type=int, default=None)
    p.add_argument("--strategy", default=None)

    p = sub.add_parser("segment", help="superpixel-segment raster images")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-k", dest="scale_k", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--min-size", dest="min_size", type=int, default=None)
    p.add_argument("images", nargs="+", help="PNG/PPM image files")

    p = sub.add_parser("pool", help="mask-average-pool feature maps into embeddings")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="predict class rasters for test images")
    _add_common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature-a1", dest="temperature_a1", type=float, default=None)
    p.add_argument("--temperature-a2", dest="temperature_a2", type=float, default=None)
    p.add_argument("--top-k", dest="top_k_candidates", type=int, default=None)
    p.add_argument("--probs", action="store_true", help="also dump per-pixel probabilities")
    p.add_argument("--colormap", action="store_true", help="also write colormap PNGs")

    p = sub.add_parser("eval", help="compare predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("inspect", help="validate and summarize an artifact")
    _add_common(p)
    p.add_argument("path")

    p = sub.add_parser("render", help="colormap PNG from an id raster")
    _add_common(p)
    p.add_argument("msk")
    p.add_argument("--out", required=True)

    return parser


def _print(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads if args.threads and args.threads > 0 else default_threads()

    try:
        if args.command == "synth":
            spec = SynthSpec(
                seed=args.seed,
                n_concepts=args.concepts,
                dim=args.dim,
                samples_per_concept=args.samples,
                noise_radius=args.noise,
                misalignment_rate=args.misalignment_rate,
                ambient_rate=args.ambient_rate,
                alias_rate=args.alias_rate,
                n_test_images=args.test_images,
                test_image_size=args.test_size,
            )
            _print(stage_synth(spec, args.out))
        elif args.command == "pair":
            count = stage_pair(args.ingest, args.out, threads=threads)
            _print({"pairs": count, "out": args.out})
        elif args.command == "enhance":
            cfg = _resolve_config(args)
            report = args.report
            if report is None:
                out = args.out
                report = out[: -len(".jsonl")] + ".report.json" if out.endswith(".jsonl") else out + ".report.json"
            _print(stage_enhance(args.ingest, args.pairs, args.out, report, cfg))
        elif args.command == "build-ref":
            cfg = _resolve_config(args)
            _print(stage_build_ref(args.ingest, args.pairs, args.out, cfg))
        elif args.command == "segment":
            cfg = _resolve_config(args)
            ks = stage_segment(args.images, args.out, cfg, threads=threads)
            _print({"images": len(ks), "segments": ks})
        elif args.command == "pool":
            done = stage_pool(args.features, args.masks, args.out, threads=threads)
            _print({"pooled": done})
        elif args.command == "retrieve":
            cfg = _resolve_config(args)
            done = stage_retrieve(
                args.ref,
                args.test,
                args.out,
                cfg,
                threads=threads,
                write_probs=args.probs,
                write_png=args.colormap,
            )
            _print({"predicted": done})
        elif args.command == "eval":
            result = stage_eval(args.pred, args.gt, args.out, threads=threads)
            _print(result)
        elif args.command == "inspect":
            _print(stage_inspect(args.path))
        elif args.command == "render":
            stage_render(args.msk, args.out)
            _print({"rendered": args.out})
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command}")
    except SegrefError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
