"""Command-line frontend for the exporter."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BackendError, make_backend
from .export import (
    export_descriptions,
    export_feature_maps,
    export_ingest,
    export_segment_embeddings,
    export_text_embeddings,
)
from .wire import WireError, write_json


def _add_backend_args(parser):
    parser.add_argument("--backend", default="hashproj",
                        help="hashproj (offline) or clip[:model-name]")
    parser.add_argument("--feature-dim", type=int, default=32)
    parser.add_argument("--text-dim", type=int, default=32)
    parser.add_argument("--grid", type=int, default=7)
    parser.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlm-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="write descriptions.jsonl for an image folder")
    _add_backend_args(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("features", help="write FMP1 feature maps")
    _add_backend_args(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("text", help="write a text lexicon (EMB1 + jsonl sidecar)")
    _add_backend_args(p)
    p.add_argument("--terms", required=True, help="file with one term per line")
    p.add_argument("--out", required=True, help="output stem (writes .emb and .jsonl)")

    p = sub.add_parser("segments", help="pool feature maps under masks into EMB1")
    _add_backend_args(p)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="produce a full engine ingest directory")
    _add_backend_args(p)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phrases", default=None,
                   help="optional jsonl of {image_id, phrases} records")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backend = make_backend(
            args.backend,
            feature_dim=args.feature_dim,
            text_dim=args.text_dim,
            grid=args.grid,
        )
        if args.command == "describe":
            manifest = export_descriptions(backend, args.images, args.out, args.threads)
            write_json(Path(args.out) / "describe_manifest.json", manifest.to_dict())
        elif args.command == "features":
            manifest = export_feature_maps(backend, args.images, args.out, args.threads)
            write_json(Path(args.out) / "features_manifest.json", manifest.to_dict())
        elif args.command == "text":
            terms = [
                line.strip()
                for line in Path(args.terms).read_text("utf-8").splitlines()
                if line.strip()
            ]
            manifest = export_text_embeddings(backend, terms, args.out)
        elif args.command == "segments":
            manifest = export_segment_embeddings(
                backend, args.images, args.masks, args.out, args.threads
            )
            write_json(Path(args.out) / "segments_manifest.json", manifest.to_dict())
        else:
            phrases = None
            if args.phrases:
                phrases = {}
                for line in Path(args.phrases).read_text("utf-8").splitlines():
                    if line.strip():
                        rec = json.loads(line)
                        phrases[rec["image_id"]] = list(rec["phrases"])
            manifest = export_ingest(
                backend, args.images, args.masks, args.out, phrases, args.threads
            )
        print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
        if manifest.failures:
            print(
                f"warning: {len(manifest.failures)} input(s) failed", file=sys.stderr
            )
    except (BackendError, WireError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
