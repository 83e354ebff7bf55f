"""End-to-end command-line checks on a miniature configuration."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mzd.cli import main

TINY_TOML = """
dataset = "{dataset}"
seed = 5
total_iterations = {iters}
episodes_per_batch = 2
checkpoint_every = 0

[model]
d_model = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
n_queries = 12
d_s = 16
scene_size = 32
grid_size = 4
ffn_dim = 32
"""


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("cliworld")
    rc = main(
        [
            "make-dataset",
            "--out",
            str(out),
            "--seed",
            "5",
            "--shapes",
            "3",
            "--colors",
            "3",
            "--scene-size",
            "32",
            "--max-objects",
            "2",
            "--train",
            "10",
            "--test-zsd",
            "4",
            "--test-gzsd",
            "4",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(world, tmp_path_factory):
    run = tmp_path_factory.mktemp("clirun")
    cfg = run / "run.toml"
    cfg.write_text(TINY_TOML.format(dataset=world, iters=3))
    rc = main(["train", "--config", str(cfg), "--out", str(run), "--quiet"])
    assert rc == 0
    return run, cfg


def test_dataset_layout(world):
    assert (world / "vocabulary.json").is_file()
    for split in ("train", "test_zsd", "test_gzsd"):
        assert (world / split / "annotations.json").is_file()
        assert any((world / split / "scenes").glob("*.f32"))


def test_training_log_identity(trained):
    run, _ = trained
    with open(run / "training_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for row in rows:
        total = float(row["total"])
        combined = (
            1.0 * float(row["cls"])
            + 5.0 * float(row["l1"])
            + 2.0 * float(row["giou"])
            + 1.0 * float(row["cont"])
        )
        assert abs(total - combined) < 1e-9


def test_zero_iterations_checkpoint_is_initialization(world, tmp_path):
    from mzd.model import init_params, load_checkpoint
    from mzd.train import init_rng
    from mzd.config import load_run_config

    cfg_path = tmp_path / "zero.toml"
    cfg_path.write_text(TINY_TOML.format(dataset=world, iters=0))
    rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "out"), "--quiet"])
    assert rc == 0
    loaded = load_checkpoint(tmp_path / "out" / "checkpoint_final.mzd")
    config = load_run_config(cfg_path)
    fresh = init_params(config.model, init_rng(config.seed))
    for name, t in fresh.items():
        assert np.array_equal(loaded[name].data, t.data), name


def test_infer_count_and_schema(trained, world, tmp_path):
    run, cfg = trained
    out = tmp_path / "dets.json"
    rc = main(
        [
            "infer",
            "--config",
            str(cfg),
            "--checkpoint",
            str(run / "checkpoint_final.mzd"),
            "--split",
            "test_zsd",
            "--classes",
            "unseen",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    dets = json.loads(out.read_text())
    payload = json.loads((world / "test_zsd" / "annotations.json").read_text())
    n_scenes = len(payload["images"])
    assert len(dets) == 12 * n_scenes  # one detection per query per scene
    unseen = {c["id"] for c in payload["categories"] if not c["seen"]}
    assert {d["category_id"] for d in dets} <= unseen
    assert set(dets[0]) == {"image_id", "category_id", "bbox", "score"}


def test_eval_writes_reports_and_is_deterministic(trained, tmp_path):
    run, cfg = trained
    outs = []
    for tag in ("e1", "e2"):
        out = tmp_path / tag
        rc = main(
            [
                "eval",
                "--config",
                str(cfg),
                "--checkpoint",
                str(run / "checkpoint_final.mzd"),
                "--mode",
                "gzsd",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        outs.append(out)
    a, b = outs
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    blob = json.loads((a / "report.json").read_text())
    assert set(blob["map"]) == {"0.4", "0.5", "0.6"}
    assert {"seen", "unseen", "hm"} <= set(blob["map"]["0.5"])


def test_eval_from_detections_file(trained, tmp_path):
    run, cfg = trained
    dets = tmp_path / "d.json"
    rc = main(
        [
            "infer",
            "--config",
            str(cfg),
            "--checkpoint",
            str(run / "checkpoint_final.mzd"),
            "--split",
            "test_zsd",
            "--out",
            str(dets),
        ]
    )
    assert rc == 0
    rc = main(
        [
            "eval",
            "--config",
            str(cfg),
            "--detections",
            str(dets),
            "--mode",
            "zsd",
            "--split",
            "test_zsd",
            "--out",
            str(tmp_path / "ev"),
        ]
    )
    assert rc == 0
    assert (tmp_path / "ev" / "report.csv").is_file()


def test_dump_embeddings_schema(trained, tmp_path):
    run, cfg = trained
    out = tmp_path / "emb.csv"
    rc = main(
        [
            "dump-embeddings",
            "--config",
            str(cfg),
            "--checkpoint",
            str(run / "checkpoint_final.mzd"),
            "--split",
            "test_gzsd",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["class_id", "seen"] + [f"v{i}" for i in range(16)]
    assert len(rows) > 1
    assert len(rows[1]) == 18


def test_gradcheck_cli_passes():
    rc = main(["gradcheck", "--coords", "40", "--seed", "3"])
    assert rc == 0


def test_unknown_class_id_fails(trained, tmp_path):
    run, cfg = trained
    rc = main(
        [
            "infer",
            "--config",
            str(cfg),
            "--checkpoint",
            str(run / "checkpoint_final.mzd"),
            "--split",
            "test_zsd",
            "--classes",
            "999",
            "--out",
            str(tmp_path / "x.json"),
        ]
    )
    assert rc == 2
