"""Per-class matching and the three-head episode loss.

For each class in the episode's set, the class's query block is matched
one-to-one against that class's revised targets (real boxes labeled 1/0 by
class equality, then no-object padding).  The matching cost per
(target, prediction) entry is

    w_cls * focal_cost(delta_i, score_j) + [delta_i = 1] *
        (w_l1 * |b_i - b_j|_1 + w_giou * (1 - giou(b_i, b_j)))

with no-object rows costing zero everywhere, so padding never biases the
geometry.  The matched queries then split three ways: positives (matched
to this class's boxes), other-class negatives (matched to a real box of a
different class), and background negatives (matched to padding).

Heads train on different splits: the classification head sees every query
(labels from the match), the regression head only the positives, and the
contrastive head pulls projected positive features toward the class
semantic vector against the other-class negatives only; background is
excluded from its denominator.  Negative classes contribute only the
classification term.  The episode loss is the mean over the class set in
canonical order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import diffcore as dc
from .assignment import solve
from .episodes import ClassTargets

_CLAMP = 1e-12


class LossError(ValueError):
    """Mismatched prediction/target sizes or empty class sets."""


@dataclass(frozen=True)
class LossWeights:
    """Loss coefficients; the matching cost reuses the same values."""

    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_cont: float = 1.0

    def __post_init__(self):
        if min(self.w_cls, self.w_l1, self.w_giou, self.w_cont) < 0:
            raise LossError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"focal alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise LossError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass
class ClassPredictions:
    """One class's query block: scores (T,), boxes (T, 4), hidden (T, d)."""

    scores: dc.Tensor
    boxes: dc.Tensor
    hidden: dc.Tensor

    @property
    def size(self) -> int:
        return self.scores.data.shape[0]


@dataclass
class ClassMatch:
    """Optimal per-class assignment and the induced three-way query split.

    Index arrays are local to the class's query block.  ``positives[i]``
    is the query matched to target row ``pos_target_rows[i]``; ``labels``
    is 1 exactly on positive queries.
    """

    class_id: int
    perm: np.ndarray
    labels: np.ndarray
    positives: np.ndarray
    pos_target_rows: np.ndarray
    negatives_other: np.ndarray
    negatives_bg: np.ndarray


def matching_cost(
    scores: np.ndarray,
    boxes: np.ndarray,
    targets: ClassTargets,
    w: LossWeights,
    fp: FocalParams,
) -> np.ndarray:
    """Cost matrix with target rows and prediction columns."""
    k = len(scores)
    if targets.size != k or len(boxes) != k:
        raise LossError(
            f"size mismatch: {targets.size} targets, {k} scores, {len(boxes)} boxes"
        )
    return _kernels.matching_cost_fill(
        np.asarray(scores, dtype=np.float64),
        np.asarray(boxes, dtype=np.float64),
        targets.delta,
        targets.real,
        targets.boxes,
        w.w_cls,
        w.w_l1,
        w.w_giou,
        fp.alpha,
        fp.gamma,
    )


def class_specific_match(
    scores: np.ndarray,
    boxes: np.ndarray,
    targets: ClassTargets,
    w: LossWeights,
    fp: FocalParams,
) -> ClassMatch:
    """Solve the class's assignment and split its queries three ways."""
    cost = matching_cost(scores, boxes, targets, w, fp)
    perm = solve(cost).perm
    k = len(perm)
    labels = np.zeros(k)
    pos_target_rows = np.flatnonzero(targets.delta == 1)
    positives = perm[pos_target_rows]
    labels[positives] = 1.0
    negatives_other = perm[targets.real & (targets.delta == 0)]
    negatives_bg = perm[~targets.real]
    return ClassMatch(
        class_id=targets.class_id,
        perm=perm,
        labels=labels,
        positives=positives,
        pos_target_rows=pos_target_rows,
        negatives_other=negatives_other,
        negatives_bg=negatives_bg,
    )


def focal_loss(scores: dc.Tensor, labels: np.ndarray, fp: FocalParams) -> dc.Tensor:
    """Binary focal loss summed over every query of the class."""
    return dc.focal_sum(scores, labels, fp.alpha, fp.gamma)


def box_loss(
    boxes: dc.Tensor,
    match: ClassMatch,
    targets: ClassTargets,
    w: LossWeights,
) -> dc.Tensor:
    """Weighted l1 + GIoU over positive pairs; exactly zero when none."""
    if match.positives.size == 0:
        return dc.constant(0.0)
    pred = dc.gather_rows(boxes, match.positives, unique=True)
    gt = targets.boxes[match.pos_target_rows]
    return dc.add(
        dc.scale(dc.l1_pair_sum(pred, gt), w.w_l1),
        dc.scale(dc.giou_pair_loss_sum(pred, gt), w.w_giou),
    )


def contrastive_loss(
    project,
    hidden: dc.Tensor,
    match: ClassMatch,
    omega: np.ndarray,
    kappa: float,
    normalize: bool = True,
) -> dc.Tensor:
    """InfoNCE pulling projected positives toward the class vector.

    The candidate pool is positives plus other-class negatives; background
    matches stay out of the denominator.  ``project`` maps hidden rows to
    semantic space (the model's contrastive head).  With ``normalize`` the
    similarity is a cosine scaled by 1/kappa, otherwise a raw dot product.
    """
    if kappa <= 0:
        raise LossError(f"kappa must be positive, got {kappa}")
    n_pos = int(match.positives.size)
    if n_pos == 0:
        return dc.constant(0.0)
    pool = np.concatenate([match.positives, match.negatives_other])
    feats = project(dc.gather_rows(hidden, pool, unique=True))
    anchor = np.asarray(omega, dtype=np.float64)
    sims = dc.cosine_rows(feats, anchor) if normalize else dc.dot_rows(feats, anchor)
    return dc.info_nce(sims, n_pos, kappa)


@dataclass
class PerClassLoss:
    class_id: int
    total: dc.Tensor
    focal: float
    l1: float
    giou: float
    cont: float


def per_class_loss(
    project,
    preds: ClassPredictions,
    targets: ClassTargets,
    match: ClassMatch,
    omega: np.ndarray,
    w: LossWeights,
    fp: FocalParams,
    kappa: float,
    cont_normalize: bool = True,
) -> PerClassLoss:
    """Combine the heads for one class.

    Positive classes get all three terms; classes with no ground truth
    contribute classification only.
    """
    focal = focal_loss(preds.scores, match.labels, fp)
    total = dc.scale(focal, w.w_cls)
    l1_val = giou_val = cont_val = 0.0
    if match.positives.size:
        pred = dc.gather_rows(preds.boxes, match.positives, unique=True)
        gt = targets.boxes[match.pos_target_rows]
        l1 = dc.l1_pair_sum(pred, gt)
        gi = dc.giou_pair_loss_sum(pred, gt)
        cont = contrastive_loss(project, preds.hidden, match, omega, kappa, cont_normalize)
        total = dc.add(
            total,
            dc.add(
                dc.add(dc.scale(l1, w.w_l1), dc.scale(gi, w.w_giou)),
                dc.scale(cont, w.w_cont),
            ),
        )
        l1_val, giou_val, cont_val = float(l1.data), float(gi.data), float(cont.data)
    return PerClassLoss(
        class_id=targets.class_id,
        total=total,
        focal=float(focal.data),
        l1=l1_val,
        giou=giou_val,
        cont=cont_val,
    )


def episode_loss(per_class: list[dc.Tensor]) -> dc.Tensor:
    """Arithmetic mean of per-class losses over the episode's class set."""
    if not per_class:
        raise LossError("episode has no classes")
    return dc.reduce_mean(dc.stack_scalars(per_class))
