"""Command-line harness: dataset generation, training, inference,
evaluation, gradient checking, and embedding dumps."""

from __future__ import annotations

import os

# Tiny matrices dominate this workload; BLAS thread pools only add handoff
# overhead.  Must be set before numpy initializes its backend.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import concurrent.futures
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, require_dataset
from .engine import dump_embedding_rows, infer_scene
from .episodes import SemanticVocab
from .metrics import Detection, detections_from_json, detections_to_json, evaluate
from .model import load_checkpoint
from .synthworld import SceneDataset, WorldConfig, generate_dataset
from .train import train


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("MZD_THREADS", "1")))
    except ValueError:
        return 1


def _pool_map(fn, items):
    workers = _n_workers()
    if workers == 1:
        return [fn(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        return load_run_config(args.config, overrides)
    from .config import run_config_from_dict

    return run_config_from_dict(overrides)


def cmd_make_dataset(args) -> int:
    config = WorldConfig(
        n_shapes=args.shapes,
        n_colors=args.colors,
        d_attr=args.d_attr,
        unseen_fraction=args.unseen_fraction,
        scene_size=args.scene_size,
        max_objects=args.max_objects,
    )
    summary = generate_dataset(
        args.out, config, args.train, args.test_zsd, args.test_gzsd, args.seed
    )
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    result = train(config, args.out, quiet=args.quiet)
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    print(f"final loss: {result.final_loss:.6f}")
    return 0


def _query_ids(vocab: SemanticVocab, spec: str) -> tuple[int, ...]:
    if spec == "unseen":
        return vocab.unseen_ids
    if spec == "seen":
        return vocab.seen_ids
    if spec == "all":
        return vocab.all_ids
    return tuple(int(tok) for tok in spec.split(","))


def _infer_split(
    ps, vocab, dataset: SceneDataset, class_ids, seed: int, random_scores: bool
) -> list[Detection]:
    def one(image_id: int) -> list[Detection]:
        rng = None
        if random_scores:
            rng = np.random.default_rng(np.random.SeedSequence((seed, 777, image_id)))
        return infer_scene(
            ps,
            vocab,
            dataset.pixels_of(image_id),
            class_ids,
            image_id,
            dataset.size,
            rng_scores=rng,
        )

    out: list[Detection] = []
    for dets in _pool_map(one, dataset.image_ids):
        out.extend(dets)
    return out


def cmd_infer(args) -> int:
    config = _load_config(args)
    root = require_dataset(config)
    vocab = SemanticVocab.load(root / "vocabulary.json")
    dataset = SceneDataset(root / args.split)
    ps = load_checkpoint(args.checkpoint)
    class_ids = _query_ids(vocab, args.classes)
    dets = _infer_split(ps, vocab, dataset, class_ids, config.seed, args.random_scores)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(detections_to_json(dets)))
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    root = require_dataset(config)
    split = args.split or ("test_zsd" if args.mode == "zsd" else "test_gzsd")
    dataset = SceneDataset(root / split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.detections and not args.checkpoint:
        raise SystemExit("eval needs --checkpoint or --detections")
    if args.detections:
        dets = detections_from_json(json.loads(Path(args.detections).read_text()))
    else:
        vocab = SemanticVocab.load(root / "vocabulary.json")
        ps = load_checkpoint(args.checkpoint)
        class_ids = vocab.unseen_ids if args.mode == "zsd" else vocab.all_ids
        dets = _infer_split(
            ps, vocab, dataset, class_ids, config.seed, args.random_scores
        )
        (out / "detections.json").write_text(json.dumps(detections_to_json(dets)))
    report = evaluate(dets, dataset.annotation_payload(), args.mode)
    report.save(out / "report.json", out / "report.csv")
    print((out / "report.csv").read_text().rstrip())
    return 0


def cmd_gradcheck(args) -> int:
    from . import diffcore as dc
    from .engine import EpisodeHyper, episode_graph
    from .episodes import ClassSet
    from .model import ModelConfig, init_params
    from .synthworld import build_vocabulary, generate_scene

    # tiny configuration: the whole episode loss against central differences
    model_cfg = ModelConfig(
        d_model=16,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        n_queries=12,
        d_s=16,
        scene_size=32,
        grid_size=4,
        ffn_dim=32,
    )
    world = WorldConfig(n_shapes=3, n_colors=3, d_attr=8, scene_size=32)
    vocab = build_vocabulary(world, args.seed)
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 5)))
    scene = generate_scene(vocab, vocab.seen_ids, world, rng)
    ps = init_params(model_cfg, np.random.default_rng(np.random.SeedSequence((args.seed, 6))))
    hyper = EpisodeHyper()
    positives = tuple(sorted(set(int(c) for c in scene.classes)))
    negatives = tuple(c for c in vocab.seen_ids if c not in positives)[: len(positives)]
    class_set = ClassSet(positives=positives, negatives=negatives)

    def build():
        return episode_graph(
            ps, vocab, scene.pixels, scene.classes, scene.boxes, class_set, hyper
        ).loss

    report = dc.grad_check(
        build,
        ps.named(),
        n_coords=args.coords,
        eps=args.eps,
        rng=np.random.default_rng(np.random.SeedSequence((args.seed, 7))),
    )
    print(report)
    if report.max_rel_err >= 1e-4:
        print("FAIL: max relative error above 1e-4")
        return 1
    print("OK")
    return 0


def cmd_dump_embeddings(args) -> int:
    config = _load_config(args)
    root = require_dataset(config)
    vocab = SemanticVocab.load(root / "vocabulary.json")
    dataset = SceneDataset(root / args.split)
    ps = load_checkpoint(args.checkpoint)
    rows = dump_embedding_rows(ps, vocab, dataset, config.hyper())
    d_s = ps.config.d_s
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "seen"] + [f"v{i}" for i in range(d_s)])
        for cid, seen, vec in rows:
            writer.writerow([cid, int(seen)] + [repr(float(x)) for x in vec])
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mzd",
        description="Episodic zero-shot detection on a synthetic attribute world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate the synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--shapes", type=int, default=4)
    p.add_argument("--colors", type=int, default=5)
    p.add_argument("--d-attr", type=int, default=8)
    p.add_argument("--unseen-fraction", type=float, default=0.2)
    p.add_argument("--scene-size", type=int, default=64)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test-zsd", type=int, default=200)
    p.add_argument("--test-gzsd", type=int, default=200)
    p.set_defaults(fn=cmd_make_dataset)

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="decode a split against queried classes")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test_zsd")
    p.add_argument("--classes", default="unseen", help="unseen|seen|all or id,id,...")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--random-scores", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="run inference plus metrics on a test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="pre-computed detections JSON (skips inference)")
    p.add_argument("--mode", choices=["zsd", "gzsd"], required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--random-scores", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the episode loss")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-embeddings", help="projected features of matched positives")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test_gzsd")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_dump_embeddings)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surfaced as a clean CLI error, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
