"""Episode assembly: forward pass, per-class matching, loss graph, inference.

One episode builds a fresh graph: encode the scene, fuse the class set
into the queries, decode, then per class (in canonical order) match the
class's query block against its revised targets and accumulate the
three-head loss.  The per-class losses are averaged into the episode loss.

Group switches select which of the three matched query groups feed each
head, defaulting to: classification sees all queries, regression sees
positives only, and the contrastive pool is positives plus other-class
negatives.  Setting a weight to zero disables a head outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .episodes import ClassSet, SemanticVocab, VocabEntry, revise_labels
from .losses import (
    ClassMatch,
    ClassPredictions,
    FocalParams,
    LossWeights,
    class_specific_match,
    contrastive_loss,
    episode_loss,
    focal_loss,
    per_class_loss,
)
from .metrics import Detection
from .model import (
    DecodeOut,
    FusedQueries,
    ParamStore,
    decode,
    encode,
    fuse_queries,
    project_hidden,
)

GROUPS = ("pos", "other", "bg")


@dataclass(frozen=True)
class EpisodeHyper:
    """Loss hyperparameters plus the head/group ablation switches."""

    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    kappa: float = 0.2
    cont_normalize: bool = True
    cls_groups: tuple[str, ...] = ("pos", "other", "bg")
    reg_groups: tuple[str, ...] = ("pos",)
    cont_groups: tuple[str, ...] = ("pos", "other")

    def __post_init__(self):
        for name in ("cls_groups", "reg_groups", "cont_groups"):
            bad = set(getattr(self, name)) - set(GROUPS)
            if bad:
                raise ValueError(f"{name} contains unknown groups {bad}")
        if "pos" not in self.reg_groups or "pos" not in self.cont_groups or "pos" not in self.cls_groups:
            raise ValueError("every head trains on the positive group")


@dataclass
class EpisodeResult:
    loss: dc.Tensor
    components: dict[str, float]
    matches: list[ClassMatch]
    fused: FusedQueries
    out: DecodeOut


def _group_indices(match: ClassMatch, groups: tuple[str, ...]) -> np.ndarray:
    parts = []
    if "pos" in groups:
        parts.append(match.positives)
    if "other" in groups:
        parts.append(match.negatives_other)
    if "bg" in groups:
        parts.append(match.negatives_bg)
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def _class_loss(
    ps: ParamStore,
    preds: ClassPredictions,
    targets,
    match: ClassMatch,
    omega: np.ndarray,
    hyper: EpisodeHyper,
):
    """Per-class loss honoring the group switches.

    With the default groups this is exactly ``losses.per_class_loss``."""
    w, fp = hyper.weights, hyper.focal
    default = (
        hyper.cls_groups == ("pos", "other", "bg")
        and hyper.reg_groups == ("pos",)
        and hyper.cont_groups == ("pos", "other")
    )
    if default:
        return per_class_loss(
            lambda z: project_hidden(ps, z),
            preds,
            targets,
            match,
            omega,
            w,
            fp,
            hyper.kappa,
            hyper.cont_normalize,
        )

    from .losses import PerClassLoss

    cls_idx = _group_indices(match, hyper.cls_groups)
    cls_idx.sort()
    focal = focal_loss(
        dc.gather_rows(preds.scores, cls_idx, unique=True), match.labels[cls_idx], fp
    )
    total = dc.scale(focal, w.w_cls)
    l1_val = giou_val = cont_val = 0.0
    reg_pairs_q, reg_pairs_t = [match.positives], [match.pos_target_rows]
    if "other" in hyper.reg_groups:
        other_rows = np.flatnonzero(targets.real & (targets.delta == 0))
        reg_pairs_q.append(match.perm[other_rows])
        reg_pairs_t.append(other_rows)
    q_idx = np.concatenate(reg_pairs_q)
    t_idx = np.concatenate(reg_pairs_t)
    if q_idx.size:
        pred = dc.gather_rows(preds.boxes, q_idx, unique=True)
        gt = targets.boxes[t_idx]
        l1 = dc.l1_pair_sum(pred, gt)
        gi = dc.giou_pair_loss_sum(pred, gt)
        total = dc.add(total, dc.add(dc.scale(l1, w.w_l1), dc.scale(gi, w.w_giou)))
        l1_val, giou_val = float(l1.data), float(gi.data)
    if match.positives.size:
        pool_match = match
        if hyper.cont_groups != ("pos", "other"):
            extra_other = match.negatives_other if "other" in hyper.cont_groups else np.empty(0, dtype=np.int64)
            extra_bg = match.negatives_bg if "bg" in hyper.cont_groups else np.empty(0, dtype=np.int64)
            pool_match = ClassMatch(
                class_id=match.class_id,
                perm=match.perm,
                labels=match.labels,
                positives=match.positives,
                pos_target_rows=match.pos_target_rows,
                negatives_other=np.concatenate([extra_other, extra_bg]),
                negatives_bg=np.empty(0, dtype=np.int64),
            )
        cont = contrastive_loss(
            lambda z: project_hidden(ps, z),
            preds.hidden,
            pool_match,
            omega,
            hyper.kappa,
            hyper.cont_normalize,
        )
        total = dc.add(total, dc.scale(cont, w.w_cont))
        cont_val = float(cont.data)
    return PerClassLoss(
        class_id=targets.class_id,
        total=total,
        focal=float(focal.data),
        l1=l1_val,
        giou=giou_val,
        cont=cont_val,
    )


def _default_groups(hyper: EpisodeHyper) -> bool:
    return (
        hyper.cls_groups == ("pos", "other", "bg")
        and hyper.reg_groups == ("pos",)
        and hyper.cont_groups == ("pos", "other")
    )


def episode_graph(
    ps: ParamStore,
    vocab: SemanticVocab,
    scene: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    class_set: ClassSet,
    hyper: EpisodeHyper,
) -> EpisodeResult:
    """Build the full differentiable loss for one episode.

    With the default group switches the per-class sums are assembled
    batched (one focal node over all queries, one box-pair node over all
    positives) before the 1/L class average; this equals the per-class
    composition up to float reassociation and is tested against it.
    Non-default group ablations take the per-class path.
    """
    tokens = encode(ps, scene)
    fused = fuse_queries(ps, class_set, vocab)
    out = decode(ps, tokens, fused)
    if _default_groups(hyper):
        return _episode_batched(ps, vocab, gt_classes, gt_boxes, fused, out, hyper)
    totals: list[dc.Tensor] = []
    comps = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "cont": 0.0}
    matches: list[ClassMatch] = []
    for cid, lo, hi in fused.blocks:
        t_tau = hi - lo
        if t_tau == 0:
            totals.append(dc.constant(0.0))
            continue
        targets = revise_labels(gt_classes, gt_boxes, cid, t_tau)
        preds = ClassPredictions(
            scores=dc.rows(out.scores, lo, hi),
            boxes=dc.rows(out.boxes, lo, hi),
            hidden=dc.rows(out.hidden, lo, hi),
        )
        match = class_specific_match(
            preds.scores.data, preds.boxes.data, targets, hyper.weights, hyper.focal
        )
        pcl = _class_loss(ps, preds, targets, match, vocab.embedding(cid), hyper)
        totals.append(pcl.total)
        comps["cls"] += pcl.focal
        comps["l1"] += pcl.l1
        comps["giou"] += pcl.giou
        comps["cont"] += pcl.cont
        matches.append(match)
    loss = episode_loss(totals)
    n = len(fused.blocks)
    components = {k: v / n for k, v in comps.items()}
    components["total"] = float(loss.data)
    return EpisodeResult(loss=loss, components=components, matches=matches, fused=fused, out=out)


def _episode_batched(
    ps: ParamStore,
    vocab: SemanticVocab,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    fused,
    out,
    hyper: EpisodeHyper,
) -> EpisodeResult:
    w, fp = hyper.weights, hyper.focal
    n_queries = len(fused.class_of_query)
    labels = np.zeros(n_queries)
    matches: list[ClassMatch] = []
    pos_q: list[np.ndarray] = []
    pos_gt: list[np.ndarray] = []
    pools: list[np.ndarray] = []
    pool_anchors: list[np.ndarray] = []
    pool_npos: list[int] = []
    for cid, lo, hi in fused.blocks:
        t_tau = hi - lo
        if t_tau == 0:
            continue
        targets = revise_labels(gt_classes, gt_boxes, cid, t_tau)
        match = class_specific_match(
            out.scores.data[lo:hi], out.boxes.data[lo:hi], targets, w, fp
        )
        matches.append(match)
        labels[lo + match.perm] = targets.delta
        if match.positives.size:
            pos_q.append(lo + match.positives)
            pos_gt.append(targets.boxes[match.pos_target_rows])
            pools.append(lo + np.concatenate([match.positives, match.negatives_other]))
            pool_anchors.append(vocab.embedding(cid))
            pool_npos.append(int(match.positives.size))

    focal = dc.focal_sum(out.scores, labels, fp.alpha, fp.gamma)
    parts = dc.scale(focal, w.w_cls)
    l1_val = giou_val = cont_val = 0.0
    if pos_q:
        q_idx = np.concatenate(pos_q)
        gt = np.concatenate(pos_gt)
        pred = dc.gather_rows(out.boxes, q_idx, unique=True)
        l1 = dc.l1_pair_sum(pred, gt)
        gi = dc.giou_pair_loss_sum(pred, gt)
        parts = dc.add(parts, dc.add(dc.scale(l1, w.w_l1), dc.scale(gi, w.w_giou)))
        l1_val, giou_val = float(l1.data), float(gi.data)
        if w.w_cont != 0.0:
            all_pool = np.concatenate(pools)
            proj = project_hidden(ps, dc.gather_rows(out.hidden, all_pool, unique=True))
            conts = []
            off = 0
            for pool, anchor, n_pos in zip(pools, pool_anchors, pool_npos):
                feats = dc.rows(proj, off, off + len(pool))
                sims = (
                    dc.cosine_rows(feats, anchor)
                    if hyper.cont_normalize
                    else dc.dot_rows(feats, anchor)
                )
                conts.append(dc.info_nce(sims, n_pos, hyper.kappa))
                off += len(pool)
            cont = dc.reduce_sum(dc.stack_scalars(conts))
            parts = dc.add(parts, dc.scale(cont, w.w_cont))
            cont_val = float(cont.data)
    n = len(fused.blocks)
    loss = dc.scale(parts, 1.0 / n)
    components = {
        "cls": float(focal.data) / n,
        "l1": l1_val / n,
        "giou": giou_val / n,
        "cont": cont_val / n,
        "total": float(loss.data),
    }
    return EpisodeResult(loss=loss, components=components, matches=matches, fused=fused, out=out)


# ---------------------------------------------------------------------------
# inference


def infer_scene(
    ps: ParamStore,
    vocab: SemanticVocab,
    scene: np.ndarray,
    class_ids: tuple[int, ...],
    image_id: int,
    scene_size: int,
    rng_scores: np.random.Generator | None = None,
) -> list[Detection]:
    """Decode one scene against a queried class set; one detection per query.

    ``rng_scores`` replaces model scores with uniform noise (the
    classification-head-off ablation)."""
    for cid in class_ids:
        if cid not in vocab.entries:
            raise KeyError(f"unknown class id {cid}")
    class_set = ClassSet(positives=tuple(sorted(class_ids)), negatives=())
    tokens = encode(ps, scene)
    fused = fuse_queries(ps, class_set, vocab)
    out = decode(ps, tokens, fused)
    scores = out.scores.data
    if rng_scores is not None:
        scores = rng_scores.uniform(1e-6, 1.0 - 1e-6, size=scores.shape)
    dets = []
    s = float(scene_size)
    for i, cid in enumerate(fused.class_of_query):
        cx, cy, w, h = out.boxes.data[i]
        dets.append(
            Detection(
                image_id=image_id,
                class_id=int(cid),
                score=float(np.clip(scores[i], 1e-9, 1.0 - 1e-9)),
                box_xyxy=(
                    (cx - 0.5 * w) * s,
                    (cy - 0.5 * h) * s,
                    (cx + 0.5 * w) * s,
                    (cy + 0.5 * h) * s,
                ),
            )
        )
    return dets


def dump_embedding_rows(
    ps: ParamStore,
    vocab: SemanticVocab,
    dataset,
    hyper: EpisodeHyper,
) -> list[tuple[int, bool, np.ndarray]]:
    """Projected hidden features of every matched positive prediction.

    Rows are ordered by (image id, class id, target row): deterministic.
    """
    rows_out: list[tuple[int, bool, np.ndarray]] = []
    for image_id in dataset.image_ids:
        classes = dataset.classes_of(image_id)
        if classes.size == 0:
            continue
        class_set = ClassSet(positives=tuple(sorted(set(int(c) for c in classes))), negatives=())
        tokens = encode(ps, dataset.pixels_of(image_id))
        fused = fuse_queries(ps, class_set, vocab)
        out = decode(ps, tokens, fused)
        boxes = dataset.boxes_of(image_id)
        for cid, lo, hi in fused.blocks:
            t_tau = hi - lo
            if t_tau == 0:
                continue
            targets = revise_labels(classes, boxes, cid, t_tau)
            if targets.n_positive == 0:
                continue
            match = class_specific_match(
                out.scores.data[lo:hi],
                out.boxes.data[lo:hi],
                targets,
                hyper.weights,
                hyper.focal,
            )
            z = dc.Tensor(out.hidden.data[lo:hi][match.positives])
            projected = project_hidden(ps, z).data
            for row in projected:
                rows_out.append((cid, vocab.is_seen(cid), row.copy()))
    return rows_out


def permute_embeddings(vocab: SemanticVocab, seed: int) -> SemanticVocab:
    """Control vocabulary: class-embedding assignment permuted.

    The seeded permutation is redrawn until no class keeps its own vector,
    so the control genuinely severs every class-semantics correspondence.
    """
    ids = list(vocab.entries)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 97)))
    n = len(ids)
    perm = None
    for _ in range(1000):
        cand = rng.permutation(n)
        if not np.any(cand == np.arange(n)):
            perm = cand
            break
    if perm is None:  # tiny vocabularies: fall back to a cyclic shift
        perm = (np.arange(n) + 1) % n
    entries = []
    for i, cid in enumerate(ids):
        src = vocab.entries[ids[int(perm[i])]]
        e = vocab.entries[cid]
        entries.append(
            VocabEntry(id=e.id, name=e.name, seen=e.seen, embedding=src.embedding.copy())
        )
    return SemanticVocab(entries)
