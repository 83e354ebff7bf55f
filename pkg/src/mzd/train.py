"""Episodic training loop with an adaptive-moment optimizer.

Each iteration samples a batch of episodes from independent, iteration-
and slot-keyed generator streams, accumulates their gradients, averages,
clips by global norm, and applies a bias-corrected moment update with
decoupled weight decay.  Determinism: the whole run is a pure function of
(config, seed); rerunning produces bit-identical checkpoints and logs.

A non-finite loss aborts the run, leaving the last cadence checkpoint on
disk.  Training refuses datasets whose annotations mention classes outside
the seen split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import OptimizerConfig, RunConfig, require_dataset
from .engine import episode_graph, permute_embeddings
from .episodes import NoPositiveClasses, SemanticVocab, sample_class_set
from .model import ParamStore, init_params, save_checkpoint
from .synthworld import SceneDataset


class TrainingError(RuntimeError):
    """Divergence or dataset-purity failure."""


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, params: ParamStore, config: OptimizerConfig):
        self.params = params
        self.cfg = config
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def clip_gradients(self) -> float:
        """Scale all gradients so the global norm is at most grad_clip."""
        total = 0.0
        for _, t in self.params.items():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        norm = math.sqrt(total)
        if not math.isfinite(norm):
            raise TrainingError("non-finite gradient norm")
        limit = self.cfg.grad_clip
        if limit > 0.0 and norm > limit:
            scale = limit / norm
            for _, t in self.params.items():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if c.weight_decay > 0.0:
                t.data -= c.lr * c.weight_decay * t.data
            t.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def episode_rng(seed: int, iteration: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 101, iteration, slot)))


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 100)))


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    iterations: int
    final_loss: float


def _validate_purity(dataset: SceneDataset, vocab: SemanticVocab) -> None:
    seen = set(vocab.seen_ids)
    for image_id in dataset.image_ids:
        bad = set(int(c) for c in dataset.classes_of(image_id)) - seen
        if bad:
            raise TrainingError(
                f"dataset purity violation: image {image_id} has non-seen classes {sorted(bad)}"
            )


def train(config: RunConfig, out_dir: str | Path, quiet: bool = False) -> TrainResult:
    root = require_dataset(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = SemanticVocab.load(root / "vocabulary.json")
    if config.shuffle_embeddings:
        vocab = permute_embeddings(vocab, config.seed)
    dataset = SceneDataset(root / "train")
    _validate_purity(dataset, vocab)
    hyper = config.hyper()

    ps = init_params(config.model, init_rng(config.seed))
    opt = AdamW(ps, config.optimizer)
    image_ids = dataset.image_ids
    batch = config.episodes_per_batch

    log_path = out / "training_log.csv"
    ckpt_path = out / "checkpoint_final.mzd"
    rows: list[list] = []
    final_loss = float("nan")

    def flush_log() -> None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "total", "cls", "l1", "giou", "cont"])
            writer.writerows(rows)

    for iteration in range(config.total_iterations):
        ps.zero_grads()
        sums = {"total": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0, "cont": 0.0}
        for slot in range(batch):
            rng = episode_rng(config.seed, iteration, slot)
            for _ in range(16):
                image_id = image_ids[int(rng.integers(len(image_ids)))]
                classes = dataset.classes_of(image_id)
                try:
                    class_set = sample_class_set(
                        classes, vocab.seen_ids, config.lambda_pi, rng
                    )
                except NoPositiveClasses:
                    continue
                break
            else:
                raise TrainingError("could not sample a non-empty episode")
            g = dc.Graph()
            with g:
                result = episode_graph(
                    ps,
                    vocab,
                    dataset.pixels_of(image_id),
                    classes,
                    dataset.boxes_of(image_id),
                    class_set,
                    hyper,
                )
            if not math.isfinite(float(result.loss.data)):
                flush_log()
                raise TrainingError(
                    f"non-finite loss at iteration {iteration}; last checkpoint retained"
                )
            g.backward(result.loss)
            for key in sums:
                sums[key] += result.components[key]
        for _, t in ps.items():
            if t.grad is not None:
                t.grad *= 1.0 / batch
        opt.clip_gradients()
        opt.step()
        final_loss = sums["total"] / batch
        rows.append(
            [iteration]
            + [repr(sums[k] / batch) for k in ("total", "cls", "l1", "giou", "cont")]
        )
        if config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            save_checkpoint(ps, out / f"checkpoint_{iteration + 1:06d}.mzd")
            flush_log()
        if not quiet and (iteration % max(1, config.total_iterations // 20) == 0):
            print(f"iter {iteration}: loss {final_loss:.4f}", flush=True)

    save_checkpoint(ps, ckpt_path)
    flush_log()
    return TrainResult(
        checkpoint=ckpt_path,
        log_path=log_path,
        iterations=config.total_iterations,
        final_loss=final_loss,
    )
