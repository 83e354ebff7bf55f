"""Semantic vocabularies, episodic class-set sampling, and label revision.

An episode pairs one scene with a class set: the positives are exactly the
distinct classes present in the scene, the negatives are drawn without
replacement from the absent classes of the pool, sized so the positive
rate comes as close to ``lambda_pi`` as integer counts allow (negative
count rounds half-up).  Within a class set, positives precede negatives
and each block is sorted by class id; the whole pipeline treats that as
the canonical order, so the episode loss cannot depend on how a caller
happened to arrange the ids.

Per-class matching targets carry one entry per ground-truth box of the
scene, marked 1 when the box's class equals the queried class and 0
otherwise, padded with no-object slots up to the class's query count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EpisodeError(ValueError):
    """Invalid vocabulary, class set, or target construction."""


class NoPositiveClasses(EpisodeError):
    """Scene has no annotated objects; the episode should be skipped."""


@dataclass(frozen=True)
class VocabEntry:
    id: int
    name: str
    seen: bool
    embedding: np.ndarray


class SemanticVocab:
    """Class id -> (name, semantic vector, seen flag), with a seen/unseen split.

    Vectors must share one dimension; seen and unseen ids are disjoint and
    jointly cover every class.
    """

    def __init__(self, entries: list[VocabEntry]):
        if not entries:
            raise EpisodeError("vocabulary is empty")
        dims = {e.embedding.shape for e in entries}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise EpisodeError(f"embeddings must share one 1-d shape, got {dims}")
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise EpisodeError("duplicate class ids in vocabulary")
        self.entries = {e.id: e for e in sorted(entries, key=lambda e: e.id)}
        self.seen_ids = tuple(e.id for e in self.entries.values() if e.seen)
        self.unseen_ids = tuple(e.id for e in self.entries.values() if not e.seen)
        self.d_s = int(next(iter(dims))[0])

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(self.entries)

    def embedding(self, class_id: int) -> np.ndarray:
        return self.entries[class_id].embedding

    def embedding_matrix(self, class_ids) -> np.ndarray:
        return np.stack([self.entries[c].embedding for c in class_ids])

    def is_seen(self, class_id: int) -> bool:
        return self.entries[class_id].seen

    def to_json(self) -> dict:
        return {
            "classes": [
                {
                    "id": e.id,
                    "name": e.name,
                    "seen": e.seen,
                    "embedding": [float(v) for v in e.embedding],
                }
                for e in self.entries.values()
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SemanticVocab":
        try:
            entries = [
                VocabEntry(
                    id=int(c["id"]),
                    name=str(c["name"]),
                    seen=bool(c["seen"]),
                    embedding=np.asarray(c["embedding"], dtype=np.float64),
                )
                for c in obj["classes"]
            ]
        except (KeyError, TypeError) as exc:
            raise EpisodeError(f"malformed vocabulary object: {exc}") from exc
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "SemanticVocab":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ClassSet:
    """One episode's classes: positives present in the scene, sampled absent
    negatives, both blocks sorted by id."""

    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    achieved_rate: float = field(default=0.0)

    def __post_init__(self):
        ordered = self.positives + self.negatives
        if len(set(ordered)) != len(ordered):
            raise EpisodeError(f"class set has duplicate ids: {ordered}")

    @property
    def ordered(self) -> tuple[int, ...]:
        """Canonical layout order: all classes sorted by id.

        Deliberately id-sorted rather than positives-first: the query
        blocks are laid out in this order, and a layout that always put
        positive classes in the leading blocks would let the learned query
        embeddings encode "early block = class present", a positional
        shortcut that inverts scores when a test-time class set (which has
        no negatives) is laid out differently.
        """
        return tuple(sorted(self.positives + self.negatives))

    @property
    def size(self) -> int:
        return len(self.positives) + len(self.negatives)

    def is_positive(self, class_id: int) -> bool:
        return class_id in self.positives


@dataclass
class ClassTargets:
    """Per-class revised matching targets, padded with no-object slots.

    ``delta[i]`` is 1 when real target i is a box of the queried class and 0
    otherwise; ``real[i]`` is False on padding; ``gt_class[i]`` keeps the
    original class id (-1 on padding) so the matcher can tell other-class
    targets from background.
    """

    class_id: int
    delta: np.ndarray
    real: np.ndarray
    boxes: np.ndarray
    gt_class: np.ndarray

    @property
    def size(self) -> int:
        return len(self.delta)

    @property
    def n_positive(self) -> int:
        return int(self.delta.sum())


def negative_count(n_pos: int, lambda_pi: float) -> int:
    """Negatives needed for positive rate lambda_pi, rounding half-up.

    A 1e-9 nudge keeps exact halves (e.g. 1.5 from lambda 0.4) rounding up
    despite float division noise.
    """
    if not 0.0 < lambda_pi <= 1.0:
        raise EpisodeError(f"lambda_pi must be in (0, 1], got {lambda_pi}")
    return int(np.floor(n_pos * (1.0 - lambda_pi) / lambda_pi + 0.5 + 1e-9))


def sample_class_set(
    gt_classes,
    pool,
    lambda_pi: float,
    rng: np.random.Generator,
) -> ClassSet:
    """Sample an episode's class set from scene classes and a class pool.

    Positives are the distinct classes of ``gt_classes``; negatives are
    drawn uniformly without replacement from pool classes absent from the
    scene.  When too few absent classes exist, all of them are taken and
    the achieved positive rate is recorded on the result.
    """
    positives = tuple(sorted(set(int(c) for c in gt_classes)))
    if not positives:
        raise NoPositiveClasses("scene has no annotated classes")
    absent = sorted(set(int(c) for c in pool) - set(positives))
    want = negative_count(len(positives), lambda_pi)
    if want > len(absent):
        want = len(absent)
    if want:
        chosen = rng.choice(len(absent), size=want, replace=False)
        negatives = tuple(sorted(absent[i] for i in chosen))
    else:
        negatives = ()
    rate = len(positives) / (len(positives) + len(negatives))
    return ClassSet(positives=positives, negatives=negatives, achieved_rate=rate)


def revise_labels(
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    class_id: int,
    t_tau: int,
) -> ClassTargets:
    """Build the per-class matching targets for ``class_id``.

    One entry per ground-truth box in scene order (1 when its class equals
    ``class_id``), then no-object padding up to ``t_tau``.  More real
    targets than slots is a configuration error, never a truncation.
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    n_gt = len(gt_classes)
    n_of_class = int((gt_classes == class_id).sum())
    if n_of_class > t_tau:
        raise EpisodeError(
            f"{n_of_class} boxes of class {class_id} exceed {t_tau} query slots"
        )
    if n_gt > t_tau:
        raise EpisodeError(f"{n_gt} ground-truth boxes exceed {t_tau} query slots")
    delta = np.zeros(t_tau)
    real = np.zeros(t_tau, dtype=bool)
    boxes = np.zeros((t_tau, 4))
    gt_class = np.full(t_tau, -1, dtype=np.int64)
    delta[:n_gt] = (gt_classes == class_id).astype(np.float64)
    real[:n_gt] = True
    if n_gt:
        boxes[:n_gt] = np.asarray(gt_boxes, dtype=np.float64).reshape(n_gt, 4)
    gt_class[:n_gt] = gt_classes
    return ClassTargets(class_id=class_id, delta=delta, real=real, boxes=boxes, gt_class=gt_class)
