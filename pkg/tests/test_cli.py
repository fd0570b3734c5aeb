import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from segref.cli import main
from segref.formats import (
    read_embeddings,
    read_json,
    read_mask_raster,
    write_feature_map,
    write_json,
)
from segref.pipeline import PipelineConfig


def tree_digest(root: Path) -> str:
    """Order-independent digest of every file below root."""
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    rc = main(
        [
            "synth",
            "--out", str(out),
            "--seed", "5",
            "--concepts", "4",
            "--dim", "16",
            "--samples", "20",
            "--misalignment-rate", "0.2",
            "--ambient-rate", "0.5",
            "--alias-rate", "0.5",
            "--test-images", "3",
            "--test-size", "16",
        ]
    )
    assert rc == 0
    return out


class TestPipelineCommands:
    def test_full_pipeline(self, world_dir, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        assert main(["pair", "--ingest", str(world_dir / "ingest"), "--out", str(pairs)]) == 0
        enhanced = tmp_path / "enhanced.jsonl"
        assert (
            main(
                [
                    "enhance",
                    "--ingest", str(world_dir / "ingest"),
                    "--pairs", str(pairs),
                    "--out", str(enhanced),
                    "--k-sim", "4",
                ]
            )
            == 0
        )
        report = read_json(tmp_path / "enhanced.report.json")
        assert report["prune"]["dropped_roots"] == ["background", "scene"]
        refdir = tmp_path / "ref"
        assert (
            main(
                [
                    "build-ref",
                    "--ingest", str(world_dir / "ingest"),
                    "--pairs", str(enhanced),
                    "--out", str(refdir),
                ]
            )
            == 0
        )
        preds = tmp_path / "preds"
        assert (
            main(
                [
                    "retrieve",
                    "--ref", str(refdir),
                    "--test", str(world_dir / "test"),
                    "--out", str(preds),
                    "--temperature-a1", "0.01",
                    "--temperature-a2", "0.1",
                    "--probs",
                    "--colormap",
                ]
            )
            == 0
        )
        assert (preds / "test000.msk").exists()
        assert (preds / "test000.fmp").exists()
        assert (preds / "test000.png").exists()
        results = tmp_path / "results.json"
        assert (
            main(
                ["eval", "--pred", str(preds), "--gt", str(world_dir / "test" / "gt"),
                 "--out", str(results)]
            )
            == 0
        )
        payload = read_json(results)
        assert 0.0 <= payload["miou"] <= 1.0
        capsys.readouterr()

    def test_rerun_bit_identical(self, world_dir, tmp_path, capsys):
        for attempt in ("a", "b"):
            out = tmp_path / attempt
            out.mkdir()
            assert main(["pair", "--ingest", str(world_dir / "ingest"), "--out", str(out / "p.jsonl")]) == 0
            assert (
                main(
                    [
                        "enhance",
                        "--ingest", str(world_dir / "ingest"),
                        "--pairs", str(out / "p.jsonl"),
                        "--out", str(out / "e.jsonl"),
                    ]
                )
                == 0
            )
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        capsys.readouterr()

    def test_threads_do_not_change_outputs(self, world_dir, tmp_path, capsys):
        digests = set()
        for threads in ("1", "4"):
            out = tmp_path / f"t{threads}"
            out.mkdir()
            assert (
                main(
                    ["pair", "--threads", threads, "--ingest", str(world_dir / "ingest"),
                     "--out", str(out / "p.jsonl")]
                )
                == 0
            )
            digests.add(tree_digest(out))
        assert len(digests) == 1
        capsys.readouterr()


class TestSegmentPoolRender:
    def test_segment_pool_render(self, tmp_path, rng, capsys):
        img_path = tmp_path / "toy.png"
        img = np.zeros((20, 20, 3), dtype=np.uint8)
        img[:, 10:] = 200
        Image.fromarray(img).save(img_path)
        masks_dir = tmp_path / "masks"
        assert (
            main(
                ["segment", "--out", str(masks_dir), "--scale-k", "10", "--sigma", "0",
                 "--min-size", "5", str(img_path)]
            )
            == 0
        )
        ids, k = read_mask_raster(masks_dir / "toy.msk")
        assert k == 2

        features_dir = tmp_path / "features"
        features_dir.mkdir()
        feat = rng.normal(size=(4, 4, 6)).astype(np.float32)
        write_feature_map(features_dir / "toy.fmp", feat)
        emb_dir = tmp_path / "embs"
        assert (
            main(
                ["pool", "--features", str(features_dir), "--masks", str(masks_dir),
                 "--out", str(emb_dir)]
            )
            == 0
        )
        emb = read_embeddings(emb_dir / "toy.emb")
        assert emb.rows == k and emb.normalized

        png = tmp_path / "toy_masks.png"
        assert main(["render", str(masks_dir / "toy.msk"), "--out", str(png)]) == 0
        assert png.exists()
        capsys.readouterr()


class TestInspect:
    def test_inspect_artifacts(self, world_dir, tmp_path, capsys):
        assert main(["inspect", str(world_dir / "ingest")]) == 0
        assert main(["inspect", str(world_dir / "ingest" / "text_lexicon.jsonl")]) == 0
        assert main(["inspect", str(world_dir / "test" / "gt" / "test000.msk")]) == 0
        out = capsys.readouterr().out
        assert '"MSK1"' in out

    def test_inspect_checks_report_counts(self, world_dir, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        main(["pair", "--ingest", str(world_dir / "ingest"), "--out", str(pairs)])
        enhanced = tmp_path / "enhanced.jsonl"
        main(
            ["enhance", "--ingest", str(world_dir / "ingest"), "--pairs", str(pairs),
             "--out", str(enhanced), "--k-sim", "4"]
        )
        assert main(["inspect", str(enhanced)]) == 0
        report_path = tmp_path / "enhanced.report.json"
        payload = read_json(report_path)
        payload["output_pairs"] += 1
        write_json(report_path, payload)
        assert main(["inspect", str(enhanced)]) == 1
        err = capsys.readouterr().err
        assert "ManifestMismatchError" in err

    def test_inspect_reference_set(self, world_dir, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        main(["pair", "--ingest", str(world_dir / "ingest"), "--out", str(pairs)])
        refdir = tmp_path / "ref"
        main(
            ["build-ref", "--ingest", str(world_dir / "ingest"), "--pairs", str(pairs),
             "--out", str(refdir)]
        )
        capsys.readouterr()
        assert main(["inspect", str(refdir)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["format"] == "reference-set"
        assert out["encoders"]["visual"].startswith("synth-vis")


class TestConfigHandling:
    def test_defaults_match_operating_point(self):
        cfg = PipelineConfig()
        assert cfg.delta_filter == 30
        assert cfg.k_sim == 30
        assert cfg.strategy == "group-intra"
        assert cfg.temperature_a1 == 1.0 and cfg.temperature_a2 == 1.0

    def test_config_file_merging(self, tmp_path):
        path = tmp_path / "cfg.json"
        write_json(path, {"delta_filter": 10, "k_sim": 2})
        cfg = PipelineConfig.from_file(path, {"k_sim": 5})
        assert cfg.delta_filter == 10 and cfg.k_sim == 5

    def test_invalid_flag_value_exits_one(self, world_dir, tmp_path, capsys):
        rc = main(
            ["enhance", "--ingest", str(world_dir / "ingest"), "--pairs", "nope.jsonl",
             "--out", str(tmp_path / "x.jsonl"), "--delta-filter", "150"]
        )
        assert rc == 1
        assert "delta_filter" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        write_json(path, {"delta": 10})
        rc = main(
            ["enhance", "--config", str(path), "--ingest", "x", "--pairs", "y",
             "--out", str(tmp_path / "o.jsonl")]
        )
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_input_typed_error(self, tmp_path, capsys):
        rc = main(["inspect", str(tmp_path / "missing.emb")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_encoder_mismatch_is_hard_error(self, world_dir, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        main(["pair", "--ingest", str(world_dir / "ingest"), "--out", str(pairs)])
        refdir = tmp_path / "ref"
        main(
            ["build-ref", "--ingest", str(world_dir / "ingest"), "--pairs", str(pairs),
             "--out", str(refdir)]
        )
        manifest = read_json(refdir / "manifest.json")
        manifest["encoders"]["visual"] = "other-encoder:v9"
        write_json(refdir / "manifest.json", manifest)
        rc = main(
            ["retrieve", "--ref", str(refdir), "--test", str(world_dir / "test"),
             "--out", str(tmp_path / "preds")]
        )
        assert rc == 1
        assert "encoder mismatch" in capsys.readouterr().err
