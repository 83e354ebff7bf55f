"""Detection evaluation: per-class AP, mAP, Recall@100, harmonic mean.

Protocols: the unseen-only protocol scores unseen classes on the
unseen-only split; the generalized protocol scores seen and unseen classes
separately on the mixed split and reports their harmonic mean.  All three
IoU thresholds {0.4, 0.5, 0.6} are computed.

Matching is greedy per class and image: detections in descending score
order (ties broken by detection id) claim the highest-IoU unmatched
ground-truth box at or above the threshold.  AP integrates the
precision-recall curve with the monotone (all-point) interpolation by
default; an eleven-point variant is available behind a switch.  A class
with ground truth but no detections scores 0; a class with detections but
no ground truth scores 0; a class with neither is excluded from the mean.
Recall@100 caps detections per image to the top 100 by score across all
classes, then counts matched ground-truth boxes over the split.

Detections interchange format: a JSON list of {image_id, category_id,
bbox: [x, y, w, h] in absolute pixels, score}.  Reports serialize to JSON
(values in [0, 1]) and to a CSV table with seen/unseen/harmonic-mean
columns scaled by 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou_matrix_xyxy

IOU_THRESHOLDS = (0.4, 0.5, 0.6)
RECALL_CAP = 100


class MetricsError(ValueError):
    """Unknown ids or malformed detection records."""


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    box_xyxy: tuple[float, float, float, float]

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise MetricsError(f"score must be in (0, 1), got {self.score}")


def detections_from_json(records: list[dict]) -> list[Detection]:
    dets = []
    for r in records:
        x, y, w, h = r["bbox"]
        dets.append(
            Detection(
                image_id=int(r["image_id"]),
                class_id=int(r["category_id"]),
                score=float(r["score"]),
                box_xyxy=(x, y, x + w, y + h),
            )
        )
    return dets


def detections_to_json(dets: list[Detection]) -> list[dict]:
    return [
        {
            "image_id": d.image_id,
            "category_id": d.class_id,
            "bbox": [
                d.box_xyxy[0],
                d.box_xyxy[1],
                d.box_xyxy[2] - d.box_xyxy[0],
                d.box_xyxy[3] - d.box_xyxy[1],
            ],
            "score": d.score,
        }
        for d in dets
    ]


def match_detections(
    det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float
) -> np.ndarray:
    """Greedy TP/FP flags for one class and image.

    ``det_boxes`` must already be in descending score order; each detection
    takes the highest-IoU unmatched ground truth at or above the threshold.
    """
    n = len(det_boxes)
    flags = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return flags
    ious = iou_matrix_xyxy(np.asarray(det_boxes, dtype=np.float64), np.asarray(gt_boxes, dtype=np.float64))
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(n):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_thr:
            flags[i] = True
            taken[j] = True
    return flags


def average_precision(
    flags: np.ndarray, n_gt: int, interpolation: str = "all_point"
) -> float:
    """Area under the precision-recall curve for score-ordered TP/FP flags."""
    if n_gt < 0:
        raise MetricsError("n_gt must be nonnegative")
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if interpolation == "all_point":
        env = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, env):
            if r > prev_r:
                ap += (r - prev_r) * p
                prev_r = r
        return float(ap)
    if interpolation == "eleven_point":
        total = 0.0
        for r0 in np.linspace(0.0, 1.0, 11):
            mask = recall >= r0 - 1e-12
            total += float(precision[mask].max()) if mask.any() else 0.0
        return total / 11.0
    raise MetricsError(f"unknown interpolation {interpolation!r}")


def harmonic_mean(s: float, u: float) -> float:
    """2su / (s + u); defined as 0 when both are 0."""
    if s < 0 or u < 0:
        raise MetricsError(f"harmonic mean needs nonnegative inputs, got {s}, {u}")
    if s + u == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


@dataclass
class GroupValues:
    """One metric at one threshold, split by class group."""

    unseen: float
    seen: float | None = None
    hm: float | None = None


@dataclass
class EvalReport:
    mode: str
    iou_thresholds: tuple[float, ...]
    map_values: dict[float, GroupValues]
    recall_values: dict[float, GroupValues]
    per_class_ap: dict[float, dict[int, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        def gv(v: GroupValues) -> dict:
            out = {"unseen": v.unseen}
            if v.seen is not None:
                out["seen"] = v.seen
                out["hm"] = v.hm
            return out

        return {
            "mode": self.mode,
            "iou_thresholds": list(self.iou_thresholds),
            "map": {f"{t:g}": gv(v) for t, v in self.map_values.items()},
            "recall100": {f"{t:g}": gv(v) for t, v in self.recall_values.items()},
            "per_class_ap": {
                f"{t:g}": {str(c): ap for c, ap in sorted(cls.items())}
                for t, cls in self.per_class_ap.items()
            },
        }

    def to_csv(self) -> str:
        """Paper-style table: seen / unseen / harmonic mean columns, x100."""
        lines = ["metric,iou,seen,unseen,hm"]
        for name, table in (("map", self.map_values), ("recall100", self.recall_values)):
            for t in self.iou_thresholds:
                v = table[t]
                seen = f"{100 * v.seen:.2f}" if v.seen is not None else ""
                hm = f"{100 * v.hm:.2f}" if v.hm is not None else ""
                lines.append(f"{name},{t:g},{seen},{100 * v.unseen:.2f},{hm}")
        return "\n".join(lines) + "\n"

    def save(self, json_path: str | Path, csv_path: str | Path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        Path(csv_path).write_text(self.to_csv())


def _group_recall(
    dets_by_image: dict[int, list[Detection]],
    gt_classes: dict[int, np.ndarray],
    gt_boxes: dict[int, np.ndarray],
    class_ids: set[int],
    iou_thr: float,
) -> float:
    """Matched fraction of the group's ground truth, after per-image top-100
    capping across all classes."""
    matched = 0
    total = 0
    for image_id, classes in gt_classes.items():
        keep = [c in class_ids for c in classes]
        total += int(np.sum(keep))
    if total == 0:
        return 0.0
    for image_id, dets in dets_by_image.items():
        classes = gt_classes.get(image_id)
        if classes is None or len(classes) == 0:
            continue
        boxes = gt_boxes[image_id]
        capped = dets[:RECALL_CAP]
        for cid in sorted({d.class_id for d in capped} & class_ids):
            sel = np.flatnonzero(classes == cid)
            if sel.size == 0:
                continue
            dboxes = np.array([d.box_xyxy for d in capped if d.class_id == cid])
            flags = match_detections(dboxes, boxes[sel], iou_thr)
            matched += int(flags.sum())
    return matched / total


def evaluate(
    detections: list[Detection],
    annotations: dict,
    mode: str,
    interpolation: str = "all_point",
) -> EvalReport:
    """Score a detection set against a split's annotation payload."""
    if mode not in ("zsd", "gzsd"):
        raise MetricsError(f"mode must be 'zsd' or 'gzsd', got {mode!r}")
    categories = {int(c["id"]): bool(c["seen"]) for c in annotations["categories"]}
    image_ids = {int(img["id"]) for img in annotations["images"]}
    for d in detections:
        if d.class_id not in categories:
            raise MetricsError(f"detection references unknown class id {d.class_id}")
        if d.image_id not in image_ids:
            raise MetricsError(f"detection references unknown image id {d.image_id}")

    gt_classes: dict[int, np.ndarray] = {i: [] for i in image_ids}
    gt_boxes: dict[int, list] = {i: [] for i in image_ids}
    for ann in annotations["annotations"]:
        x, y, w, h = ann["bbox"]
        gt_classes[ann["image_id"]].append(int(ann["category_id"]))
        gt_boxes[ann["image_id"]].append((x, y, x + w, y + h))
    gt_classes = {i: np.asarray(v, dtype=np.int64) for i, v in gt_classes.items()}
    gt_boxes = {
        i: np.asarray(v, dtype=np.float64).reshape(len(v), 4) for i, v in gt_boxes.items()
    }

    unseen_ids = {c for c, seen in categories.items() if not seen}
    seen_ids = {c for c, seen in categories.items() if seen}
    scored_ids = unseen_ids if mode == "zsd" else (seen_ids | unseen_ids)

    # stable global ordering: by descending score, then insertion id
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    dets_sorted = [detections[i] for i in order]
    dets_by_image: dict[int, list[Detection]] = {i: [] for i in image_ids}
    for d in dets_sorted:
        dets_by_image[d.image_id].append(d)

    n_gt_per_class: dict[int, int] = {c: 0 for c in scored_ids}
    for classes in gt_classes.values():
        for c in classes:
            if int(c) in n_gt_per_class:
                n_gt_per_class[int(c)] += 1

    map_values: dict[float, GroupValues] = {}
    recall_values: dict[float, GroupValues] = {}
    per_class_ap: dict[float, dict[int, float]] = {}
    for thr in IOU_THRESHOLDS:
        ap_per_class: dict[int, float] = {}
        for cid in sorted(scored_ids):
            cls_order = [d for d in dets_sorted if d.class_id == cid]
            n_gt = n_gt_per_class[cid]
            if n_gt == 0 and not cls_order:
                continue
            flag_of: dict[int, bool] = {}
            for image_id in sorted(dets_by_image):
                img_dets = [d for d in dets_by_image[image_id] if d.class_id == cid]
                if not img_dets:
                    continue
                sel = np.flatnonzero(gt_classes[image_id] == cid)
                dboxes = np.array([d.box_xyxy for d in img_dets])
                matched = match_detections(dboxes, gt_boxes[image_id][sel], thr)
                for d, f in zip(img_dets, matched):
                    flag_of[id(d)] = bool(f)
            tp = np.array([flag_of[id(d)] for d in cls_order], dtype=bool)
            ap_per_class[cid] = average_precision(tp, n_gt, interpolation)
        per_class_ap[thr] = ap_per_class

        def group_map(ids: set[int]) -> float:
            vals = [ap for c, ap in ap_per_class.items() if c in ids]
            return float(np.mean(vals)) if vals else 0.0

        if mode == "zsd":
            map_values[thr] = GroupValues(unseen=group_map(unseen_ids))
            recall_values[thr] = GroupValues(
                unseen=_group_recall(dets_by_image, gt_classes, gt_boxes, unseen_ids, thr)
            )
        else:
            s_map, u_map = group_map(seen_ids), group_map(unseen_ids)
            s_rec = _group_recall(dets_by_image, gt_classes, gt_boxes, seen_ids, thr)
            u_rec = _group_recall(dets_by_image, gt_classes, gt_boxes, unseen_ids, thr)
            map_values[thr] = GroupValues(
                unseen=u_map, seen=s_map, hm=harmonic_mean(s_map, u_map)
            )
            recall_values[thr] = GroupValues(
                unseen=u_rec, seen=s_rec, hm=harmonic_mean(s_rec, u_rec)
            )

    return EvalReport(
        mode=mode,
        iou_thresholds=IOU_THRESHOLDS,
        map_values=map_values,
        recall_values=recall_values,
        per_class_ap=per_class_ap,
    )
