"""Anchor-free box decoding, confidence filtering, NMS and Soft-NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BBox, iou


@dataclass(frozen=True)
class Detection:
    """One detection: box in absolute image coordinates, class id, score."""

    box: BBox
    class_id: int
    confidence: float


@dataclass(frozen=True)
class GridSpec:
    """Feature-grid layout: cols x rows cells, stride pixels per cell."""

    cols: int
    rows: int
    stride: float

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise InvalidArgumentError("grid must have at least one cell")
        if not self.stride > 0:
            raise InvalidArgumentError("stride must be > 0")


def decode_anchor_free(
    cell_index: tuple[int, int], dist_logits: np.ndarray, grid: GridSpec
) -> BBox:
    """Decode one cell's distance distributions into a box.

    The cell center is ((col + 0.5) * stride, (row + 0.5) * stride); each
    side distance is the softmax expectation over bins 0..reg_max (rows in
    order left, top, right, bottom), scaled by the stride.
    """
    col, row = cell_index
    if not (0 <= col < grid.cols and 0 <= row < grid.rows):
        raise InvalidArgumentError(f"cell {cell_index} outside grid {grid.cols}x{grid.rows}")
    z = np.asarray(dist_logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != 4 or z.shape[1] < 2:
        raise InvalidArgumentError(f"dist_logits must be (4, reg_max + 1), got {z.shape}")
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    dist = p @ np.arange(z.shape[1], dtype=np.float64)
    left, top, right, bottom = (float(d) * grid.stride for d in dist)
    ccx = (col + 0.5) * grid.stride
    ccy = (row + 0.5) * grid.stride
    return BBox.from_corners(ccx - left, ccy - top, ccx + right, ccy + bottom)


def confidence_filter(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep detections with confidence >= threshold, preserving order."""
    return [d for d in dets if d.confidence >= threshold]


def _ranked(dets: Sequence[Detection]) -> list[int]:
    # Descending confidence; ties by lower class id, then input order.
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, i))


def nms(
    dets: Sequence[Detection],
    iou_threshold: float,
    *,
    class_agnostic: bool = False,
) -> list[Detection]:
    """Greedy non-maximum suppression, per class unless class_agnostic.

    A detection survives iff its IoU with every already-kept detection of
    the same class is below the threshold. Output is sorted by descending
    confidence and the operation is idempotent.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    kept: list[Detection] = []
    for i in _ranked(dets):
        cand = dets[i]
        suppressed = any(
            (class_agnostic or k.class_id == cand.class_id)
            and iou(k.box, cand.box) >= iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(cand)
    return kept


def soft_nms(
    dets: Sequence[Detection],
    method: str = "linear",
    iou_threshold: float = 0.3,
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> list[Detection]:
    """Soft-NMS: decay overlapping same-class scores instead of dropping.

    Iteratively selects the highest-scoring remaining detection; every
    remaining same-class detection with overlap o against it is rescored by
    (1 - o) when o >= iou_threshold (linear) or by exp(-o^2 / sigma)
    unconditionally (gaussian). Detections falling below score_floor are
    discarded; the output carries the decayed scores, sorted descending.
    """
    if method not in ("linear", "gaussian"):
        raise InvalidArgumentError(f"unknown soft-nms method: {method!r}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if method == "gaussian" and not sigma > 0:
        raise InvalidArgumentError("sigma must be > 0 for the gaussian method")

    # (score, class_id, input index, detection); order rule as in nms()
    pool = [(d.confidence, d.class_id, i, d) for i, d in enumerate(dets)]
    out: list[Detection] = []
    while pool:
        best = min(range(len(pool)), key=lambda i: (-pool[i][0], pool[i][1], pool[i][2]))
        score, _, _, det = pool.pop(best)
        out.append(Detection(det.box, det.class_id, score))
        rescored = []
        for s, cid, idx, d in pool:
            if cid == det.class_id:
                o = iou(det.box, d.box)
                if method == "linear":
                    if o >= iou_threshold:
                        s = s * (1.0 - o)
                else:
                    s = s * math.exp(-(o * o) / sigma)
            if s >= score_floor:
                rescored.append((s, cid, idx, d))
        pool = rescored
    return out
