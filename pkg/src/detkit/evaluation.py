"""Prediction-to-ground-truth matching, AP, mAP50-95 and confusion matrices.

Matching is greedy by descending confidence: each detection claims the
unmatched ground truth with the highest IoU at or above the threshold (ties
to the lowest ground-truth index). AP uses the 101-point interpolated
precision-recall integration, sampling recalls 0.00, 0.01, ..., 1.00 after
applying the monotone precision envelope. mAP50-95 averages class AP over
IoU thresholds 0.50 to 0.95 in steps of 0.05 and then over classes with at
least one ground truth.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BBox, iou
from .postprocess import Detection


@dataclass(frozen=True)
class GroundTruth:
    """One annotated object: box in absolute image coordinates, class id."""

    box: BBox
    class_id: int


@dataclass(frozen=True)
class EvalConfig:
    """Threshold sweep and confusion-matrix settings.

    strict switches the true-positive rule from IoU >= t to IoU > t.
    """

    iou_min: float = 0.5
    iou_max: float = 0.95
    iou_step: float = 0.05
    confusion_iou: float = 0.5
    confusion_conf: float = 0.25
    strict: bool = False

    def __post_init__(self):
        if not (0.0 < self.iou_min <= self.iou_max <= 1.0):
            raise InvalidArgumentError(
                f"need 0 < iou_min <= iou_max <= 1, got {self.iou_min}, {self.iou_max}"
            )
        if not self.iou_step > 0:
            raise InvalidArgumentError("iou_step must be > 0")


def iou_thresholds(cfg: EvalConfig) -> list[float]:
    """Inclusive threshold list iou_min, iou_min + step, ..., iou_max."""
    n = int(round((cfg.iou_max - cfg.iou_min) / cfg.iou_step))
    ts = [round(cfg.iou_min + i * cfg.iou_step, 10) for i in range(n + 1)]
    return [t for t in ts if t <= cfg.iou_max + 1e-9]


@dataclass
class MatchResult:
    """Per-detection TP flags at one threshold, in confidence order.

    confidences are sorted descending (ties keep input order); tp[i] and
    matched_gt[i] (-1 for false positives) refer to the detection ranked i;
    gt_matched flags each ground truth. Unmatched ground truths are the
    false negatives.
    """

    confidences: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray
    gt_matched: np.ndarray


def match_detections(
    gts: Sequence[GroundTruth],
    dets: Sequence[Detection],
    iou_threshold: float,
    strict: bool = False,
) -> MatchResult:
    """Greedily match same-class detections to ground truths at one threshold."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    mat = np.array(
        [[iou(dets[i].box, g.box) for g in gts] for i in order], dtype=np.float64
    ).reshape(len(dets), len(gts))
    tp, matched = _greedy_match(mat, iou_threshold, strict)
    return MatchResult(
        confidences=np.array([dets[i].confidence for i in order], dtype=np.float64),
        tp=tp,
        matched_gt=matched,
        gt_matched=np.isin(np.arange(len(gts)), matched[matched >= 0]),
    )


def _greedy_match(
    iou_matrix: np.ndarray, threshold: float, strict: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Rows = detections in rank order, cols = ground truths."""
    n_det, n_gt = iou_matrix.shape
    tp = np.zeros(n_det, dtype=bool)
    matched = np.full(n_det, -1, dtype=np.int64)
    taken = np.zeros(n_gt, dtype=bool)
    for i in range(n_det):
        best, best_iou = -1, -1.0
        for j in range(n_gt):
            if taken[j]:
                continue
            v = iou_matrix[i, j]
            ok = v > threshold if strict else v >= threshold
            if ok and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            tp[i] = True
            matched[i] = best
            taken[best] = True
    return tp, matched


def merge_matches(results: Sequence[MatchResult]) -> MatchResult:
    """Pool per-image matches into one confidence-ranked result."""
    if not results:
        return MatchResult(
            np.empty(0), np.empty(0, dtype=bool), np.empty(0, dtype=np.int64),
            np.empty(0, dtype=bool),
        )
    conf = np.concatenate([r.confidences for r in results])
    tp = np.concatenate([r.tp for r in results])
    order = np.argsort(-conf, kind="stable")
    return MatchResult(
        confidences=conf[order],
        tp=tp[order],
        matched_gt=np.full(conf.size, -1, dtype=np.int64),
        gt_matched=np.concatenate([r.gt_matched for r in results]),
    )


def precision(tp: int, fp: int) -> float:
    """tp / (tp + fp); 0 when there are no predictions."""
    if tp < 0 or fp < 0:
        raise InvalidArgumentError("counts must be >= 0")
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def average_precision(matches: MatchResult, n_gt: int) -> float:
    """101-point interpolated AP from confidence-ranked TP flags.

    Returns 0 when n_gt is 0 (classes with predictions but no ground truth
    score 0; callers exclude no-ground-truth classes from class means).
    """
    if n_gt < 0:
        raise InvalidArgumentError("n_gt must be >= 0")
    if n_gt == 0 or matches.tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(matches.tp)
    ranks = np.arange(1, matches.tp.size + 1)
    recall = cum_tp / n_gt
    prec = cum_tp / ranks
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    samples = []
    for i in range(101):
        r = i / 100.0
        idx = int(np.searchsorted(recall, r, side="left"))
        samples.append(float(envelope[idx]) if idx < recall.size else 0.0)
    return math.fsum(samples) / 101.0


@dataclass
class ClassAP:
    class_id: int
    n_gt: int
    n_pred: int
    ap_by_threshold: list[float]
    ap: float


@dataclass
class EvalReport:
    """Per-class APs, class means and dataset counts.

    map50 / map50_95 are None when no class has a ground truth (or, for
    map50, when 0.5 is not in the threshold list).
    """

    thresholds: list[float]
    per_class: list[ClassAP] = field(default_factory=list)
    map50: Optional[float] = None
    map50_95: Optional[float] = None
    n_images: int = 0
    n_gt: int = 0
    n_predictions: int = 0


def _image_class_matches(
    gts: Sequence[GroundTruth],
    dets: Sequence[Detection],
    class_ids: Sequence[int],
    thresholds: Sequence[float],
    strict: bool,
) -> dict[int, tuple[np.ndarray, list[np.ndarray]]]:
    """Per class: confidence-ranked scores plus TP flags per threshold."""
    out: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}
    for c in class_ids:
        c_gts = [g for g in gts if g.class_id == c]
        c_dets = [d for d in dets if d.class_id == c]
        order = sorted(range(len(c_dets)), key=lambda i: (-c_dets[i].confidence, i))
        mat = np.array(
            [[iou(c_dets[i].box, g.box) for g in c_gts] for i in order],
            dtype=np.float64,
        ).reshape(len(c_dets), len(c_gts))
        conf = np.array([c_dets[i].confidence for i in order], dtype=np.float64)
        tps = [_greedy_match(mat, t, strict)[0] for t in thresholds]
        out[c] = (conf, tps)
    return out


def map_50_95(
    gts_by_image: Sequence[Sequence[GroundTruth]],
    preds_by_image: Sequence[Sequence[Detection]],
    cfg: EvalConfig = EvalConfig(),
    *,
    num_classes: Optional[int] = None,
    threads: int = 1,
) -> EvalReport:
    """Evaluate a dataset over the config's IoU threshold sweep.

    gts_by_image and preds_by_image are aligned per-image lists. Classes
    appearing in neither list are skipped; classes without ground truth are
    reported (AP 0) but excluded from the class means. The per-image work
    may run on a thread pool; results are independent of the thread count.
    """
    if len(gts_by_image) != len(preds_by_image):
        raise InvalidArgumentError(
            f"{len(gts_by_image)} ground-truth images vs {len(preds_by_image)} prediction images"
        )
    seen = {g.class_id for gts in gts_by_image for g in gts}
    seen |= {d.class_id for dets in preds_by_image for d in dets}
    if num_classes is not None:
        bad = sorted(c for c in seen if not 0 <= c < num_classes)
        if bad:
            raise InvalidArgumentError(
                f"class ids {bad} outside the class table (size {num_classes})"
            )
    class_ids = sorted(seen)
    thresholds = iou_thresholds(cfg)

    def worker(pair):
        gts, dets = pair
        return _image_class_matches(gts, dets, class_ids, thresholds, cfg.strict)

    pairs = list(zip(gts_by_image, preds_by_image))
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(worker, pairs))
    else:
        per_image = [worker(p) for p in pairs]

    report = EvalReport(
        thresholds=thresholds,
        n_images=len(pairs),
        n_gt=sum(len(g) for g in gts_by_image),
        n_predictions=sum(len(d) for d in preds_by_image),
    )
    for c in class_ids:
        n_gt_c = sum(1 for gts in gts_by_image for g in gts if g.class_id == c)
        n_pred_c = sum(1 for dets in preds_by_image for d in dets if d.class_id == c)
        conf = np.concatenate([res[c][0] for res in per_image])
        order = np.argsort(-conf, kind="stable")
        aps = []
        for ti in range(len(thresholds)):
            tp = np.concatenate([res[c][1][ti] for res in per_image])[order]
            pooled = MatchResult(
                confidences=conf[order],
                tp=tp,
                matched_gt=np.full(conf.size, -1, dtype=np.int64),
                gt_matched=np.empty(0, dtype=bool),
            )
            aps.append(average_precision(pooled, n_gt_c))
        report.per_class.append(
            ClassAP(c, n_gt_c, n_pred_c, aps, math.fsum(aps) / len(thresholds))
        )

    with_gt = [entry for entry in report.per_class if entry.n_gt > 0]
    if with_gt:
        report.map50_95 = math.fsum(e.ap for e in with_gt) / len(with_gt)
        if 0.5 in thresholds:
            i50 = thresholds.index(0.5)
            report.map50 = math.fsum(e.ap_by_threshold[i50] for e in with_gt) / len(with_gt)
    return report


def confusion_matrix(
    gts_by_image: Sequence[Sequence[GroundTruth]],
    preds_by_image: Sequence[Sequence[Detection]],
    cfg: EvalConfig,
    num_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(C+1)x(C+1) confusion counts plus the row-normalised variant.

    Rows are ground-truth classes, columns predicted classes; index C is the
    background bucket. Detections below cfg.confusion_conf are ignored.
    Matching is class-agnostic and greedy by descending IoU at
    cfg.confusion_iou; matched pairs land in [gt_class][pred_class],
    unmatched ground truths in [gt_class][background], unmatched detections
    in [background][pred_class].
    """
    if len(gts_by_image) != len(preds_by_image):
        raise InvalidArgumentError("per-image lists must align")
    if num_classes < 1:
        raise InvalidArgumentError("num_classes must be >= 1")
    counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for gts, dets in zip(gts_by_image, preds_by_image):
        dets = [d for d in dets if d.confidence >= cfg.confusion_conf]
        for g in gts:
            if not 0 <= g.class_id < num_classes:
                raise InvalidArgumentError(f"class id {g.class_id} outside class table")
        for d in dets:
            if not 0 <= d.class_id < num_classes:
                raise InvalidArgumentError(f"class id {d.class_id} outside class table")
        pairs = sorted(
            (
                (-iou(d.box, g.box), di, gi)
                for di, d in enumerate(dets)
                for gi, g in enumerate(gts)
                if iou(d.box, g.box) >= cfg.confusion_iou
            ),
        )
        det_used = [False] * len(dets)
        gt_used = [False] * len(gts)
        for neg_iou, di, gi in pairs:
            if det_used[di] or gt_used[gi]:
                continue
            det_used[di] = True
            gt_used[gi] = True
            counts[gts[gi].class_id, dets[di].class_id] += 1
        for gi, g in enumerate(gts):
            if not gt_used[gi]:
                counts[g.class_id, num_classes] += 1
        for di, d in enumerate(dets):
            if not det_used[di]:
                counts[num_classes, d.class_id] += 1
    row_sums = counts.sum(axis=1, keepdims=True)
    normalised = np.divide(
        counts, row_sums, out=np.zeros_like(counts, dtype=np.float64),
        where=row_sums > 0,
    )
    return counts, normalised
