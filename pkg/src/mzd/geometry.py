"""Box representations, conversions, and overlap measures.

Canonical storage is center-size form ``(cx, cy, w, h)`` normalized to
[0, 1] relative to the scene extent; the corner form ``(x0, y0, x1, y1)``
is a derived view.  IoU/GIoU here back the matcher, the regression loss,
and the detection metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Invalid box construction (negative width or height)."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in center-size form, coordinates in scene units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"box has negative size: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class CornerBox:
    """Axis-aligned rectangle as (x0, y0, x1, y1) corners."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise GeometryError(
                f"corner box has inverted extent: {(self.x0, self.y0, self.x1, self.y1)}"
            )


def to_corners(b: Box) -> CornerBox:
    """Convert center-size form to corner form."""
    return CornerBox(
        b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h
    )


def from_corners(c: CornerBox) -> Box:
    """Convert corner form to center-size form."""
    return Box(0.5 * (c.x0 + c.x1), 0.5 * (c.y0 + c.y1), c.x1 - c.x0, c.y1 - c.y0)


def _overlap_terms(a: Box, b: Box) -> tuple[float, float, CornerBox, CornerBox]:
    """Intersection and union areas, all derived from the corner view so that
    identical boxes give inter == union exactly."""
    ca, cb = to_corners(a), to_corners(b)
    iw = min(ca.x1, cb.x1) - max(ca.x0, cb.x0)
    ih = min(ca.y1, cb.y1) - max(ca.y0, cb.y0)
    inter = max(0.0, iw) * max(0.0, ih)
    area_a = (ca.x1 - ca.x0) * (ca.y1 - ca.y0)
    area_b = (cb.x1 - cb.x0) * (cb.y1 - cb.y0)
    return inter, area_a + area_b - inter, ca, cb


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1].

    Two degenerate (zero-area) boxes count as identical (IoU 1) only when
    they coincide exactly; a zero union at different locations gives 0.
    """
    inter, union, ca, cb = _overlap_terms(a, b)
    if union <= 0.0:
        return 1.0 if ca == cb else 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU.

    ``iou(a, b) - (|C| - |A ∪ B|) / |C|`` where C is the smallest enclosing
    axis-aligned box.  Falls back to plain IoU when C is degenerate.  Stays
    in (-1, 1] for positive-area boxes; a pair of degenerate boxes at
    different locations attains -1 exactly.
    """
    inter, union, ca, cb = _overlap_terms(a, b)
    ew = max(ca.x1, cb.x1) - min(ca.x0, cb.x0)
    eh = max(ca.y1, cb.y1) - min(ca.y0, cb.y0)
    enclosure = ew * eh
    if enclosure <= 0.0:
        return iou(a, b)
    base = inter / union if union > 0.0 else (1.0 if ca == cb else 0.0)
    return base - (enclosure - union) / enclosure


# Vectorized forms on (N, 4) float arrays; used by the matcher and metrics
# where per-Box objects would be too slow.


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    """Convert an (..., 4) array of (cx, cy, w, h) boxes to corner form."""
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    """Convert an (..., 4) array of corner boxes to center-size form."""
    x0, y0, x1, y1 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0], axis=-1)


def iou_matrix_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form boxes -> (N, M)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between (N, 4) and (M, 4) corner-form boxes -> (N, M)."""
    iou_nm = iou_matrix_xyxy(a, b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - wh[:, :, 0] * wh[:, :, 1]
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclosure = ewh[:, :, 0] * ewh[:, :, 1]
    correction = np.zeros_like(iou_nm)
    np.divide(
        enclosure - union, enclosure, out=correction, where=enclosure > 0
    )
    return iou_nm - correction
