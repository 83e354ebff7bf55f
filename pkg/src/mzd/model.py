"""The detector: patch-token encoder, class-conditioned query fusion, and a
query decoder with classification, regression, and semantic-projection heads.

The encoder embeds non-overlapping patches, adds a learned 2-d positional
table, and runs pre-norm self-attention blocks.  Query fusion projects each
class's semantic vector into model space, duplicates it over a block of
query slots (ceil-and-drop rule), and adds it to the learned query
embeddings, committing every query to one class.  The decoder alternates
query self-attention, cross-attention into the scene tokens, and a
feed-forward block; its final-norm output is the hidden feature each head
reads: a one-dimensional sigmoid accuracy score, a sigmoid-squashed
(cx, cy, w, h) box, and a linear projection back to semantic space for the
contrastive loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .episodes import ClassSet, SemanticVocab

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Configuration/geometry mismatch or non-finite head output."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 48
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_queries: int = 60
    d_s: int = 16
    scene_size: int = 64
    grid_size: int = 8
    ffn_dim: int = 96

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.scene_size % self.grid_size:
            raise ModelError(f"scene_size {self.scene_size} not divisible by grid {self.grid_size}")

    @property
    def n_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def patch_size(self) -> int:
        return self.scene_size // self.grid_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class Prediction:
    """One decoded query: its committed class, accuracy score, box, and
    hidden feature."""

    query_index: int
    class_id: int
    score: float
    box: np.ndarray
    hidden: np.ndarray


class ParamStore:
    """Named, shaped float64 parameter tensors with gradient slots."""

    def __init__(self, config: ModelConfig, params: dict[str, dc.Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def named(self) -> list[tuple[str, dc.Tensor]]:
        return list(self.params.items())

    @property
    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Deterministic initialization given a generator.

    The classification bias starts at logit(0.1) so the many negative
    queries do not dominate the focal loss in the first iterations.
    """
    d, f, ds = config.d_model, config.ffn_dim, config.d_s
    p: dict[str, np.ndarray] = {}
    p["patch_w"] = _xavier(rng, config.patch_dim, d)
    p["patch_b"] = np.zeros(d)
    p["pos_emb"] = rng.normal(0.0, 0.02, (config.n_tokens, d))

    def attn_block(prefix: str) -> None:
        p[f"{prefix}_ln1_g"] = np.ones(d)
        p[f"{prefix}_ln1_b"] = np.zeros(d)
        p[f"{prefix}_qkv_w"] = _xavier(rng, d, 3 * d)
        p[f"{prefix}_qkv_b"] = np.zeros(3 * d)
        p[f"{prefix}_attn_out_w"] = _xavier(rng, d, d)
        p[f"{prefix}_attn_out_b"] = np.zeros(d)

    def ffn_block(prefix: str, ln: str) -> None:
        p[f"{prefix}_{ln}_g"] = np.ones(d)
        p[f"{prefix}_{ln}_b"] = np.zeros(d)
        p[f"{prefix}_ffn1_w"] = _xavier(rng, d, f)
        p[f"{prefix}_ffn1_b"] = np.zeros(f)
        p[f"{prefix}_ffn2_w"] = _xavier(rng, f, d)
        p[f"{prefix}_ffn2_b"] = np.zeros(d)

    for i in range(config.n_enc_layers):
        attn_block(f"enc{i}")
        ffn_block(f"enc{i}", "ln2")
    p["enc_final_g"] = np.ones(d)
    p["enc_final_b"] = np.zeros(d)

    p["queries"] = rng.normal(0.0, 0.25, (config.n_queries, d))
    p["sem_w"] = 2.0 * _xavier(rng, ds, d)
    p["sem_b"] = np.zeros(d)

    for i in range(config.n_dec_layers):
        attn_block(f"dec{i}")
        p[f"dec{i}_ln2_g"] = np.ones(d)
        p[f"dec{i}_ln2_b"] = np.zeros(d)
        p[f"dec{i}_cross_q_w"] = _xavier(rng, d, d)
        p[f"dec{i}_cross_q_b"] = np.zeros(d)
        p[f"dec{i}_cross_kv_w"] = _xavier(rng, d, 2 * d)
        p[f"dec{i}_cross_kv_b"] = np.zeros(2 * d)
        p[f"dec{i}_cross_out_w"] = _xavier(rng, d, d)
        p[f"dec{i}_cross_out_b"] = np.zeros(d)
        ffn_block(f"dec{i}", "ln3")
    p["dec_final_g"] = np.ones(d)
    p["dec_final_b"] = np.zeros(d)

    p["cls_w"] = _xavier(rng, d, 1)
    p["cls_b"] = np.full(1, math.log(0.1 / 0.9))
    p["reg_w"] = _xavier(rng, d, 4)
    p["reg_b"] = np.zeros(4)
    p["contrast_w"] = _xavier(rng, d, ds)
    p["contrast_b"] = np.zeros(ds)

    return ParamStore(config, {k: dc.parameter(v) for k, v in p.items()})


def _self_attn_block(ps: ParamStore, prefix: str, x: dc.Tensor) -> dc.Tensor:
    h = dc.layer_norm(x, ps[f"{prefix}_ln1_g"], ps[f"{prefix}_ln1_b"])
    qkv = dc.linear(h, ps[f"{prefix}_qkv_w"], ps[f"{prefix}_qkv_b"])
    a = dc.attention_packed(qkv, ps.config.n_heads)
    return dc.add(x, dc.linear(a, ps[f"{prefix}_attn_out_w"], ps[f"{prefix}_attn_out_b"]))


def _cross_attn_block(ps: ParamStore, prefix: str, y: dc.Tensor, tokens: dc.Tensor) -> dc.Tensor:
    h = dc.layer_norm(y, ps[f"{prefix}_ln2_g"], ps[f"{prefix}_ln2_b"])
    q = dc.linear(h, ps[f"{prefix}_cross_q_w"], ps[f"{prefix}_cross_q_b"])
    kv = dc.linear(tokens, ps[f"{prefix}_cross_kv_w"], ps[f"{prefix}_cross_kv_b"])
    a = dc.attention_kv(q, kv, ps.config.n_heads)
    return dc.add(y, dc.linear(a, ps[f"{prefix}_cross_out_w"], ps[f"{prefix}_cross_out_b"]))


def _ffn_block(ps: ParamStore, prefix: str, ln: str, x: dc.Tensor) -> dc.Tensor:
    h = dc.layer_norm(x, ps[f"{prefix}_{ln}_g"], ps[f"{prefix}_{ln}_b"])
    h = dc.linear(dc.relu(dc.linear(h, ps[f"{prefix}_ffn1_w"], ps[f"{prefix}_ffn1_b"])), ps[f"{prefix}_ffn2_w"], ps[f"{prefix}_ffn2_b"])
    return dc.add(x, h)


def patches_of(scene: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Flatten a (S, S, 3) scene into (n_tokens, patch_dim) rows."""
    s, g = config.scene_size, config.grid_size
    if scene.shape != (s, s, 3):
        raise ModelError(f"scene shape {scene.shape} does not match configured {(s, s, 3)}")
    ps = config.patch_size
    return (
        np.asarray(scene, dtype=np.float64)
        .reshape(g, ps, g, ps, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, ps * ps * 3)
    )


def encode(ps: ParamStore, scene: np.ndarray) -> dc.Tensor:
    """Scene grid -> (n_tokens, d_model) token representation."""
    cfg = ps.config
    x = dc.linear(dc.constant(patches_of(scene, cfg)), ps["patch_w"], ps["patch_b"])
    x = dc.add(x, ps["pos_emb"])
    for i in range(cfg.n_enc_layers):
        x = _self_attn_block(ps, f"enc{i}", x)
        x = _ffn_block(ps, f"enc{i}", "ln2", x)
    return dc.layer_norm(x, ps["enc_final_g"], ps["enc_final_b"])


def query_counts(n_queries: int, n_classes: int) -> np.ndarray:
    """Queries allotted per class: duplication factor T = ceil(N / L), laid
    out block-by-block with the tail beyond N dropped."""
    if n_classes < 1:
        raise ModelError("class set is empty")
    if n_classes > n_queries:
        raise ModelError(f"{n_classes} classes exceed {n_queries} queries")
    t = -(-n_queries // n_classes)
    idx = np.arange(n_classes)
    return np.clip(n_queries - idx * t, 0, t)


@dataclass(frozen=True)
class FusedQueries:
    queries: dc.Tensor
    class_of_query: np.ndarray
    blocks: tuple[tuple[int, int, int], ...]  # (class_id, lo, hi) in canonical order


def fuse_queries(ps: ParamStore, class_set: ClassSet, vocab: SemanticVocab) -> FusedQueries:
    """Add projected semantic vectors to the query embeddings, class-blockwise."""
    ordered = class_set.ordered
    counts = query_counts(ps.config.n_queries, len(ordered))
    w = dc.constant(vocab.embedding_matrix(ordered))
    projected = dc.linear(w, ps["sem_w"], ps["sem_b"])
    tiled = dc.repeat_rows(projected, counts)
    fused = dc.add(ps["queries"], tiled)
    class_of_query = np.repeat(np.asarray(ordered), counts)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    blocks = tuple(
        (c, int(bounds[i]), int(bounds[i + 1])) for i, c in enumerate(ordered)
    )
    return FusedQueries(queries=fused, class_of_query=class_of_query, blocks=blocks)


@dataclass
class DecodeOut:
    hidden: dc.Tensor  # (N, d_model) final-norm decoder features
    scores: dc.Tensor  # (N,) sigmoid accuracy scores
    boxes: dc.Tensor  # (N, 4) sigmoid-squashed (cx, cy, w, h)


def decode(ps: ParamStore, tokens: dc.Tensor, fused: FusedQueries) -> DecodeOut:
    """Run the query decoder and both prediction heads."""
    cfg = ps.config
    y = fused.queries
    for i in range(cfg.n_dec_layers):
        y = _self_attn_block(ps, f"dec{i}", y)
        y = _cross_attn_block(ps, f"dec{i}", y, tokens)
        y = _ffn_block(ps, f"dec{i}", "ln3", y)
    z = dc.layer_norm(y, ps["dec_final_g"], ps["dec_final_b"])
    logits = dc.linear(z, ps["cls_w"], ps["cls_b"])
    scores = dc.reshape(dc.sigmoid(logits), (cfg.n_queries,))
    boxes = dc.sigmoid(dc.linear(z, ps["reg_w"], ps["reg_b"]))
    if dc.active_graph() is None:
        if not (np.all(np.isfinite(scores.data)) and np.all(np.isfinite(boxes.data))):
            raise ModelError("non-finite head output (training divergence signal)")
    return DecodeOut(hidden=z, scores=scores, boxes=boxes)


def project_hidden(ps: ParamStore, z: dc.Tensor) -> dc.Tensor:
    """Map hidden features to semantic space for the contrastive loss."""
    return dc.linear(z, ps["contrast_w"], ps["contrast_b"])


def forward_scene(
    ps: ParamStore, scene: np.ndarray, class_set: ClassSet, vocab: SemanticVocab
) -> tuple[FusedQueries, DecodeOut]:
    tokens = encode(ps, scene)
    fused = fuse_queries(ps, class_set, vocab)
    return fused, decode(ps, tokens, fused)


def predictions_of(fused: FusedQueries, out: DecodeOut) -> list[Prediction]:
    """Materialize per-query predictions (inference convenience)."""
    return [
        Prediction(
            query_index=i,
            class_id=int(fused.class_of_query[i]),
            score=float(out.scores.data[i]),
            box=out.boxes.data[i].copy(),
            hidden=out.hidden.data[i].copy(),
        )
        for i in range(len(fused.class_of_query))
    ]


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line, then a raw little-endian float64 blob


def save_checkpoint(ps: ParamStore, path: str | Path) -> None:
    names = list(ps.params)
    offsets = {}
    off = 0
    for n in names:
        offsets[n] = off
        off += ps[n].data.size
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ps.config),
        "params": [
            {"name": n, "shape": list(ps[n].data.shape), "offset": offsets[n]}
            for n in names
        ],
    }
    blob = np.concatenate([ps[n].data.reshape(-1) for n in names]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob.tobytes())


def load_checkpoint(path: str | Path) -> ParamStore:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {manifest.get('version')}")
    config = ModelConfig(**manifest["config"])
    params: dict[str, dc.Tensor] = {}
    for rec in manifest["params"]:
        shape = tuple(rec["shape"])
        size = int(np.prod(shape)) if shape else 1
        lo = rec["offset"]
        arr = np.array(blob[lo : lo + size], dtype=np.float64).reshape(shape)
        params[rec["name"]] = dc.parameter(arr)
    return ParamStore(config, params)
