"""Finite-difference verification of the analytic loss gradients.

Central differences at step 1e-5 are compared against the closed-form
gradients on seeded random instances. The CIoU trade-off coefficient alpha
carries no gradient, so the differentiated objective pins alpha at the
expansion point; instances are resampled away from the min/max kinks of the
box arithmetic so the comparison happens where the loss is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BBox, ciou_breakdown, ciou_loss
from .losses import (
    CellPrediction,
    CellTarget,
    LossWeights,
    Yolo1CellTarget,
    Yolo1Config,
    bce_grad,
    bce_loss,
    ciou_grad,
    composite_loss,
    composite_loss_grad,
    dfl_grad,
    dfl_loss,
    yolov1_grad,
    yolov1_loss,
)

LOSS_NAMES = ("ciou", "bce", "dfl", "composite", "yolov1")

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
DEVIATION_FLOOR = 1e-6


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Componentwise (f(x + h) - f(x - h)) / 2h."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def relative_deviation(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor) per component."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DEVIATION_FLOOR)
    return np.abs(analytic - numeric) / scale


@dataclass
class GroupResult:
    """Worst deviation seen for one parameter group."""

    max_deviation: float = 0.0
    trial: int = -1
    index: int = -1
    analytic: float = 0.0
    numeric: float = 0.0

    def update(self, trial: int, analytic: np.ndarray, numeric: np.ndarray) -> None:
        dev = relative_deviation(analytic.ravel(), numeric.ravel())
        i = int(np.argmax(dev))
        if dev[i] > self.max_deviation:
            self.max_deviation = float(dev[i])
            self.trial = trial
            self.index = i
            self.analytic = float(analytic.ravel()[i])
            self.numeric = float(numeric.ravel()[i])


@dataclass
class GradcheckReport:
    loss: str
    trials: int
    step: float
    groups: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return all(g.max_deviation <= tol for g in self.groups.values())

    def worst(self) -> tuple[str, GroupResult]:
        name = max(self.groups, key=lambda n: self.groups[n].max_deviation)
        return name, self.groups[name]


def sample_box_pair(rng: np.random.Generator,
                    kink_margin: float = 1e-3) -> tuple[BBox, BBox]:
    """Random (pred, gt) pair kept away from the box-arithmetic kinks."""
    while True:
        p = BBox(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.3, 3), rng.uniform(0.3, 3))
        g = BBox(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.3, 3), rng.uniform(0.3, 3))
        px1, py1, px2, py2 = p.corners()
        gx1, gy1, gx2, gy2 = g.corners()
        iw = min(px2, gx2) - max(px1, gx1)
        ih = min(py2, gy2) - max(py1, gy1)
        margins = (
            abs(px1 - gx1), abs(px2 - gx2), abs(py1 - gy1), abs(py2 - gy2),
            abs(iw), abs(ih),
        )
        if min(margins) > kink_margin:
            return p, g


def _check_ciou(rng: np.random.Generator, trial: int, report: GradcheckReport,
                step: float) -> None:
    pred, gt = sample_box_pair(rng)
    alpha = ciou_breakdown(pred, gt).alpha
    x = np.array([pred.cx, pred.cy, pred.w, pred.h])
    numeric = central_difference(lambda v: ciou_loss(BBox(*v), gt, alpha=alpha), x, step)
    report.groups["box"].update(trial, ciou_grad(pred, gt), numeric)


def _check_bce(rng: np.random.Generator, trial: int, report: GradcheckReport,
               step: float) -> None:
    n = int(rng.integers(1, 9))
    logits = rng.uniform(-5, 5, n)
    labels = rng.integers(0, 2, n).astype(np.float64)
    numeric = central_difference(lambda z: bce_loss(z, labels), logits, step)
    report.groups["logits"].update(trial, bce_grad(logits, labels), numeric)


def _check_dfl(rng: np.random.Generator, trial: int, report: GradcheckReport,
               step: float) -> None:
    reg_max = int(rng.integers(2, 9))
    logits = rng.uniform(-4, 4, reg_max + 1)
    target = float(rng.uniform(0.0, reg_max))
    numeric = central_difference(lambda z: dfl_loss(z, target), logits, step)
    report.groups["logits"].update(trial, dfl_grad(logits, target), numeric)


def sample_composite_instance(rng: np.random.Generator):
    """Random cell list with well-conditioned boxes for positive cells."""
    n_cells = int(rng.integers(1, 4))
    n_classes = int(rng.integers(2, 5))
    reg_max = int(rng.integers(3, 7))
    cells = []
    for _ in range(n_cells):
        pred = CellPrediction(
            class_logits=rng.uniform(-4, 4, n_classes),
            dist_logits=rng.uniform(-3, 3, (4, reg_max + 1)),
            decoded_box=BBox(0, 0, 1, 1),
        )
        labels = rng.integers(0, 2, n_classes).astype(np.float64)
        if rng.uniform() < 0.7:
            box, gt_box = sample_box_pair(rng)
            pred.decoded_box = box
            tgt = CellTarget(True, labels, gt_box, rng.uniform(0.0, reg_max, 4))
        else:
            tgt = CellTarget(False, labels)
        cells.append((pred, tgt))
    weights = LossWeights(
        lambda_box=float(rng.uniform(0.5, 6)),
        lambda_cls=float(rng.uniform(0.5, 2)),
        lambda_dfl=float(rng.uniform(0.5, 3)),
    )
    return cells, weights


def _check_composite(rng: np.random.Generator, trial: int, report: GradcheckReport,
                     step: float) -> None:
    cells, weights = sample_composite_instance(rng)
    alphas = [
        ciou_breakdown(pred.decoded_box, tgt.gt_box).alpha
        for pred, tgt in cells
        if tgt.has_object
    ]
    analytic = composite_loss_grad(cells, weights)

    def rebuild(which: str, flat: np.ndarray):
        rebuilt = []
        pos = 0
        for (pred, tgt) in cells:
            p = CellPrediction(
                pred.class_logits.copy(), pred.dist_logits.copy(), pred.decoded_box
            )
            if which == "class_logits":
                n = p.class_logits.size
                p.class_logits = flat[pos : pos + n]
                pos += n
            elif tgt.has_object and which == "dist_logits":
                n = p.dist_logits.size
                p.dist_logits = flat[pos : pos + n].reshape(p.dist_logits.shape)
                pos += n
            elif tgt.has_object and which == "box":
                p.decoded_box = BBox(*flat[pos : pos + 4])
                pos += 4
            rebuilt.append((p, tgt))
        return rebuilt

    packs = {
        "class_logits": np.concatenate([p.class_logits for p, _ in cells]),
        "dist_logits": np.concatenate(
            [p.dist_logits.ravel() for p, t in cells if t.has_object] or [np.empty(0)]
        ),
        "box": np.concatenate(
            [
                np.array([p.decoded_box.cx, p.decoded_box.cy, p.decoded_box.w, p.decoded_box.h])
                for p, t in cells
                if t.has_object
            ]
            or [np.empty(0)]
        ),
    }
    grads = {
        "class_logits": np.concatenate([g.class_logits for g in analytic]),
        "dist_logits": np.concatenate(
            [g.dist_logits.ravel() for g in analytic if g.dist_logits is not None]
            or [np.empty(0)]
        ),
        "box": np.concatenate(
            [g.box for g in analytic if g.box is not None] or [np.empty(0)]
        ),
    }
    for which, x in packs.items():
        if x.size == 0:
            continue
        numeric = central_difference(
            lambda v: composite_loss(rebuild(which, v), weights, alphas=alphas).total,
            x,
            step,
        )
        report.groups[which].update(trial, grads[which], numeric)


def sample_yolo1_instance(rng: np.random.Generator):
    """Random tensor/target pair with a clear responsible-box margin."""
    cfg = Yolo1Config(
        grid_s=int(rng.integers(1, 3)),
        boxes_b=int(rng.integers(1, 3)),
        classes_c=int(rng.integers(1, 4)),
        lambda_coord=5.0,
        lambda_noobj=0.5,
    )
    n_cells = cfg.grid_s * cfg.grid_s
    while True:
        target = []
        tensor = np.empty(cfg.tensor_length)
        for i in range(n_cells):
            base = i * cfg.cell_stride
            if rng.uniform() < 0.6:
                box = BBox(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                           rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8))
                target.append(Yolo1CellTarget(box, int(rng.integers(0, cfg.classes_c))))
            else:
                target.append(None)
            for b in range(cfg.boxes_b):
                o = base + 5 * b
                tensor[o] = rng.uniform(0.1, 0.9)
                tensor[o + 1] = rng.uniform(0.1, 0.9)
                tensor[o + 2] = rng.uniform(0.1, 0.9)
                tensor[o + 3] = rng.uniform(0.1, 0.9)
                tensor[o + 4] = rng.uniform(0.1, 0.9)
            tensor[base + 5 * cfg.boxes_b : base + cfg.cell_stride] = rng.uniform(
                0, 1, cfg.classes_c
            )
        if _responsibility_margins_ok(tensor, target, cfg):
            return tensor, target, cfg


def _responsibility_margins_ok(tensor, target, cfg, margin: float = 1e-3) -> bool:
    from .geometry import iou as _iou

    for i in range(cfg.grid_s * cfg.grid_s):
        tgt = target[i]
        if tgt is None or cfg.boxes_b < 2:
            continue
        base = i * cfg.cell_stride
        ious = []
        for b in range(cfg.boxes_b):
            o = base + 5 * b
            ious.append(_iou(BBox(*tensor[o : o + 4]), tgt.box))
        ious.sort(reverse=True)
        if ious[0] - ious[1] < margin:
            return False
    return True


def _check_yolov1(rng: np.random.Generator, trial: int, report: GradcheckReport,
                  step: float) -> None:
    tensor, target, cfg = sample_yolo1_instance(rng)
    numeric = central_difference(lambda t: yolov1_loss(t, target, cfg), tensor, step)
    report.groups["tensor"].update(trial, yolov1_grad(tensor, target, cfg), numeric)


_CHECKS = {
    "ciou": (_check_ciou, ("box",)),
    "bce": (_check_bce, ("logits",)),
    "dfl": (_check_dfl, ("logits",)),
    "composite": (_check_composite, ("class_logits", "dist_logits", "box")),
    "yolov1": (_check_yolov1, ("tensor",)),
}


def run_gradcheck(loss: str, trials: int = 100, seed: int = 0,
                  step: float = DEFAULT_STEP) -> GradcheckReport:
    """Compare analytic and central-difference gradients on random instances."""
    if loss not in _CHECKS:
        raise InvalidArgumentError(
            f"unknown loss {loss!r}; expected one of {', '.join(LOSS_NAMES)}"
        )
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    check, groups = _CHECKS[loss]
    report = GradcheckReport(loss=loss, trials=trials, step=step)
    for g in groups:
        report.groups[g] = GroupResult()
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        check(rng, trial, report, step)
    return report
