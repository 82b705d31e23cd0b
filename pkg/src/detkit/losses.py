"""Detection losses with analytic gradients, plus the momentum update rule.

Covers the composite loss (CIoU box term + multi-label BCE + distribution
focal loss, each weighted and normalised by the positive-cell count), the
classic single-stage grid loss for comparison, SGD with momentum and weight
decay, and a small demonstration loop that fits a box onto a target by
gradient descent on the CIoU term.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DivergedError, InvalidArgumentError
from .geometry import ASPECT_EPS, DIAG_EPS, BBox, ciou_breakdown, ciou_loss, iou

# Training hyper-parameter defaults.
DEFAULT_MOMENTUM = 0.937
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_LAMBDA_CLS = 1.0
DEFAULT_LAMBDA_BOX = 5.5
DEFAULT_LAMBDA_DFL = 2.5
DEFAULT_REG_MAX = 16

# Clamp for box sizes under a square root; keeps d(sqrt(w))/dw bounded.
SQRT_EPS = 1e-9

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


@dataclass(frozen=True)
class LossWeights:
    """Per-term loss weights and the weight-decay coefficient."""

    lambda_box: float = DEFAULT_LAMBDA_BOX
    lambda_cls: float = DEFAULT_LAMBDA_CLS
    lambda_dfl: float = DEFAULT_LAMBDA_DFL
    weight_decay_phi: float = DEFAULT_WEIGHT_DECAY

    def __post_init__(self):
        for name in ("lambda_box", "lambda_cls", "lambda_dfl", "weight_decay_phi"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class CellPrediction:
    """Raw head outputs for one grid cell.

    class_logits: (C,) pre-sigmoid class scores.
    dist_logits:  (4, reg_max + 1) pre-softmax distance distributions, row
                  order left / top / right / bottom.
    decoded_box:  the box decoded from the distance distributions, in the
                  same coordinate space as the target box.
    """

    class_logits: np.ndarray
    dist_logits: np.ndarray
    decoded_box: BBox


@dataclass
class CellTarget:
    """Assignment for one grid cell.

    class_labels is a (C,) multi-label 0/1 vector; gt_box and dfl_target
    (one continuous bin coordinate per side, each in [0, reg_max]) are
    present exactly when has_object is true.
    """

    has_object: bool
    class_labels: np.ndarray
    gt_box: Optional[BBox] = None
    dfl_target: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LossReport:
    """Composite-loss value and its unweighted per-term sums."""

    total: float
    box_term: float
    cls_term: float
    dfl_term: float
    n_pos: int


@dataclass
class CellGradient:
    """Gradient of the composite loss for one cell.

    dist_logits and box are None for cells without an assigned object.
    """

    class_logits: np.ndarray
    dist_logits: Optional[np.ndarray] = None
    box: Optional[np.ndarray] = None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + math.log(np.sum(np.exp(z - m))))


def bce_loss(class_logits: Sequence[float], labels: Sequence[float]) -> float:
    """Multi-label binary cross entropy summed over classes.

    Uses max(z, 0) - z*y + log(1 + exp(-|z|)), stable up to |z| ~ 1e4.
    """
    z = np.asarray(class_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise InvalidArgumentError(
            f"logits shape {z.shape} != labels shape {y.shape}"
        )
    return float(np.sum(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def bce_grad(class_logits: Sequence[float], labels: Sequence[float]) -> np.ndarray:
    """d(bce_loss)/d(logits) = sigmoid(logits) - labels."""
    z = np.asarray(class_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise InvalidArgumentError(
            f"logits shape {z.shape} != labels shape {y.shape}"
        )
    return _sigmoid(z) - y


def _dfl_bins(target: float, reg_max: int) -> tuple[int, float, float]:
    # Bracketing bins and interpolation weights; target == reg_max reuses the
    # last pair with all weight on the right bin.
    lo = min(int(math.floor(target)), reg_max - 1)
    return lo, (lo + 1) - target, target - lo


def dfl_loss(side_logits: Sequence[float], target: float) -> float:
    """Distribution focal loss for one side distance.

    Interpolates the negative log-probability of the two bins bracketing the
    continuous target; an integer target reduces to -log p(bin).
    """
    z = np.asarray(side_logits, dtype=np.float64)
    reg_max = z.size - 1
    if reg_max < 1:
        raise InvalidArgumentError("need at least two distance bins")
    if not (0.0 <= target <= reg_max):
        raise InvalidArgumentError(f"target {target} outside [0, {reg_max}]")
    logp = _log_softmax(z)
    lo, wl, wr = _dfl_bins(target, reg_max)
    return float(-(wl * logp[lo] + wr * logp[lo + 1]))


def dfl_grad(side_logits: Sequence[float], target: float) -> np.ndarray:
    """d(dfl_loss)/d(side_logits) = softmax - interpolated one-hot."""
    z = np.asarray(side_logits, dtype=np.float64)
    reg_max = z.size - 1
    if reg_max < 1:
        raise InvalidArgumentError("need at least two distance bins")
    if not (0.0 <= target <= reg_max):
        raise InvalidArgumentError(f"target {target} outside [0, {reg_max}]")
    p = np.exp(_log_softmax(z))
    lo, wl, wr = _dfl_bins(target, reg_max)
    g = p.copy()
    g[lo] -= wl
    g[lo + 1] -= wr
    return g


def ciou_grad(pred: BBox, gt: BBox) -> np.ndarray:
    """Gradient of the CIoU loss w.r.t. the predicted (cx, cy, w, h).

    The trade-off coefficient alpha is held constant (no gradient flows
    through it), matching standard CIoU practice.
    """
    px1, py1, px2, py2 = pred.corners()
    gx1, gy1, gx2, gy2 = gt.corners()

    # d(corner)/d(cx, cy, w, h)
    d_px1 = np.array([1.0, 0.0, -0.5, 0.0])
    d_px2 = np.array([1.0, 0.0, 0.5, 0.0])
    d_py1 = np.array([0.0, 1.0, 0.0, -0.5])
    d_py2 = np.array([0.0, 1.0, 0.0, 0.5])
    zero = np.zeros(4)

    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    area_p = pred.w * pred.h
    area_g = gt.w * gt.h

    d_q = zero
    q = 0.0
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        union = area_p + area_g - inter
        if union > 0.0:
            q = inter / union
            d_iw = (d_px2 if px2 < gx2 else zero) - (d_px1 if px1 > gx1 else zero)
            d_ih = (d_py2 if py2 < gy2 else zero) - (d_py1 if py1 > gy1 else zero)
            d_inter = ih * d_iw + iw * d_ih
            d_area = np.array([0.0, 0.0, pred.h, pred.w])
            d_union = d_area - d_inter
            d_q = (d_inter * union - inter * d_union) / (union * union)

    dx = pred.cx - gt.cx
    dy = pred.cy - gt.cy
    dist = dx * dx + dy * dy
    d_dist = np.array([2.0 * dx, 2.0 * dy, 0.0, 0.0])

    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    diag = cw * cw + ch * ch
    if diag <= DIAG_EPS:
        d_term = zero
    else:
        d_cw = (d_px2 if px2 > gx2 else zero) - (d_px1 if px1 < gx1 else zero)
        d_ch = (d_py2 if py2 > gy2 else zero) - (d_py1 if py1 < gy1 else zero)
        d_diag = 2.0 * cw * d_cw + 2.0 * ch * d_ch
        d_term = (d_dist * diag - dist * d_diag) / (diag * diag)

    gh = max(gt.h, ASPECT_EPS)
    ph = max(pred.h, ASPECT_EPS)
    diff = math.atan(gt.w / gh) - math.atan(pred.w / ph)
    nu = _FOUR_OVER_PI_SQ * diff * diff
    denom = pred.w * pred.w + ph * ph
    d_nu = np.array(
        [
            0.0,
            0.0,
            -2.0 * _FOUR_OVER_PI_SQ * diff * ph / denom,
            2.0 * _FOUR_OVER_PI_SQ * diff * pred.w / denom if pred.h > ASPECT_EPS else 0.0,
        ]
    )
    alpha = 0.0 if (q >= 1.0 or nu == 0.0) else nu / (1.0 - q)

    return -d_q + d_term + alpha * d_nu


def _validate_cells(
    cells: Sequence[tuple[CellPrediction, CellTarget]]
) -> tuple[int, int]:
    if not cells:
        raise InvalidArgumentError("need at least one cell")
    pred0, _ = cells[0]
    n_classes = pred0.class_logits.shape[0]
    dist_shape = pred0.dist_logits.shape
    if len(dist_shape) != 2 or dist_shape[0] != 4 or dist_shape[1] < 2:
        raise InvalidArgumentError(
            f"dist_logits must be (4, reg_max + 1) with reg_max >= 1, got {dist_shape}"
        )
    for i, (pred, tgt) in enumerate(cells):
        if pred.class_logits.shape != (n_classes,):
            raise InvalidArgumentError(f"cell {i}: inconsistent class count")
        if pred.dist_logits.shape != dist_shape:
            raise InvalidArgumentError(f"cell {i}: inconsistent dist_logits shape")
        if tgt.class_labels.shape != (n_classes,):
            raise InvalidArgumentError(f"cell {i}: labels shape mismatch")
        if tgt.has_object and (tgt.gt_box is None or tgt.dfl_target is None):
            raise InvalidArgumentError(f"cell {i}: positive cell missing targets")
    return n_classes, dist_shape[1] - 1


def composite_loss(
    cells: Sequence[tuple[CellPrediction, CellTarget]],
    weights: LossWeights,
    *,
    alphas: Optional[Sequence[float]] = None,
) -> LossReport:
    """Weighted sum of box (CIoU), classification (BCE) and DFL terms.

    The box and DFL sums run over cells containing an object; classification
    runs over every cell. Each sum is divided by the positive-cell count
    (1 when there are no positives) and scaled by its weight. Per-cell
    contributions are accumulated with exact summation, so the result is
    invariant under permutation of the cell list.

    ``alphas`` optionally pins the CIoU trade-off coefficient per positive
    cell (in cell order); gradient checking uses this because alpha carries
    no gradient.
    """
    _validate_cells(cells)
    n_pos = sum(1 for _, tgt in cells if tgt.has_object)
    if alphas is not None and len(alphas) != n_pos:
        raise InvalidArgumentError(
            f"got {len(alphas)} alpha overrides for {n_pos} positive cells"
        )

    box_vals: list[float] = []
    cls_vals: list[float] = []
    dfl_vals: list[float] = []
    pos_i = 0
    for pred, tgt in cells:
        cls_vals.append(bce_loss(pred.class_logits, tgt.class_labels))
        if not tgt.has_object:
            continue
        a = alphas[pos_i] if alphas is not None else None
        box_vals.append(ciou_loss(pred.decoded_box, tgt.gt_box, alpha=a))
        dfl_vals.append(
            math.fsum(
                dfl_loss(pred.dist_logits[k], float(tgt.dfl_target[k]))
                for k in range(4)
            )
        )
        pos_i += 1

    box_term = math.fsum(box_vals)
    cls_term = math.fsum(cls_vals)
    dfl_term = math.fsum(dfl_vals)
    denom = n_pos if n_pos > 0 else 1
    total = (
        (weights.lambda_box / denom) * box_term
        + (weights.lambda_cls / denom) * cls_term
        + (weights.lambda_dfl / denom) * dfl_term
    )
    return LossReport(total, box_term, cls_term, dfl_term, n_pos)


def composite_loss_grad(
    cells: Sequence[tuple[CellPrediction, CellTarget]],
    weights: LossWeights,
) -> list[CellGradient]:
    """Gradient of composite_loss w.r.t. every class logit, every distance
    logit and the four decoded box parameters of each positive cell."""
    _validate_cells(cells)
    n_pos = sum(1 for _, tgt in cells if tgt.has_object)
    denom = n_pos if n_pos > 0 else 1
    s_cls = weights.lambda_cls / denom
    s_box = weights.lambda_box / denom
    s_dfl = weights.lambda_dfl / denom

    out: list[CellGradient] = []
    for pred, tgt in cells:
        g = CellGradient(class_logits=s_cls * bce_grad(pred.class_logits, tgt.class_labels))
        if tgt.has_object:
            g.box = s_box * ciou_grad(pred.decoded_box, tgt.gt_box)
            g.dist_logits = s_dfl * np.stack(
                [
                    dfl_grad(pred.dist_logits[k], float(tgt.dfl_target[k]))
                    for k in range(4)
                ]
            )
        out.append(g)
    return out


# --------------------------------------------------------------------------
# Classic grid loss (single-stage detector, B boxes + C class scores / cell)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Yolo1Config:
    """Grid layout and regularisation coefficients for the classic loss."""

    grid_s: int
    boxes_b: int
    classes_c: int
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        if self.grid_s < 1 or self.boxes_b < 1 or self.classes_c < 1:
            raise InvalidArgumentError("grid_s, boxes_b and classes_c must be >= 1")

    @property
    def cell_stride(self) -> int:
        return self.boxes_b * 5 + self.classes_c

    @property
    def tensor_length(self) -> int:
        return self.grid_s * self.grid_s * self.cell_stride


@dataclass(frozen=True)
class Yolo1CellTarget:
    """Ground truth for one grid cell: box in the prediction's encoding
    space plus the object class."""

    box: BBox
    class_id: int


# Per-cell targets in row-major cell order; None marks an empty cell.
Yolo1Target = Sequence[Optional[Yolo1CellTarget]]


def _yolo1_layout(cfg: Yolo1Config, tensor: np.ndarray):
    """Yield (cell_index, boxes (B,5) view, class_scores (C,) view)."""
    stride = cfg.cell_stride
    for i in range(cfg.grid_s * cfg.grid_s):
        cell = tensor[i * stride : (i + 1) * stride]
        yield i, cell[: cfg.boxes_b * 5].reshape(cfg.boxes_b, 5), cell[cfg.boxes_b * 5 :]


def _responsible_box(boxes: np.ndarray, gt_box: BBox) -> int:
    # Highest-IoU predictor; ties broken by lowest box index.
    best, best_iou = 0, -1.0
    for j in range(boxes.shape[0]):
        x, y, w, h = boxes[j, :4]
        v = iou(BBox(float(x), float(y), float(w), float(h)), gt_box)
        if v > best_iou:
            best, best_iou = j, v
    return best


def yolov1_loss(pred_tensor: Sequence[float], target: Yolo1Target, cfg: Yolo1Config) -> float:
    """Sum-of-squares grid loss over a flat S*S*(B*5+C) prediction tensor.

    Tensor layout per cell (row-major cells): B blocks of (x, y, w, h, conf)
    followed by C class scores. The responsible predictor in an object cell
    is the one whose box has the highest IoU with the ground truth; its
    confidence target is 1, all other confidences regress to 0 under the
    no-object weight. Negative sizes under the square root are clamped to 0.
    """
    t = np.asarray(pred_tensor, dtype=np.float64)
    if t.shape != (cfg.tensor_length,):
        raise InvalidArgumentError(
            f"tensor length {t.size} != expected {cfg.tensor_length}"
        )
    if len(target) != cfg.grid_s * cfg.grid_s:
        raise InvalidArgumentError(
            f"target has {len(target)} cells, expected {cfg.grid_s * cfg.grid_s}"
        )

    clamped = False
    total = 0.0
    for i, boxes, class_scores in _yolo1_layout(cfg, t):
        tgt = target[i]
        if tgt is None:
            total += cfg.lambda_noobj * float(np.sum(boxes[:, 4] ** 2))
            continue
        j = _responsible_box(boxes, tgt.box)
        x, y, w, h, conf = (float(v) for v in boxes[j])
        if w < 0.0 or h < 0.0:
            clamped = True
        total += cfg.lambda_coord * ((tgt.box.cx - x) ** 2 + (tgt.box.cy - y) ** 2)
        total += cfg.lambda_coord * (
            (math.sqrt(max(tgt.box.w, 0.0)) - math.sqrt(max(w, 0.0))) ** 2
            + (math.sqrt(max(tgt.box.h, 0.0)) - math.sqrt(max(h, 0.0))) ** 2
        )
        total += (1.0 - conf) ** 2
        for k in range(cfg.boxes_b):
            if k != j:
                total += cfg.lambda_noobj * float(boxes[k, 4]) ** 2
        onehot = np.zeros(cfg.classes_c)
        if not 0 <= tgt.class_id < cfg.classes_c:
            raise InvalidArgumentError(f"class id {tgt.class_id} outside 0..{cfg.classes_c - 1}")
        onehot[tgt.class_id] = 1.0
        total += float(np.sum((onehot - class_scores) ** 2))
    if clamped:
        warnings.warn(
            "negative box size clamped to 0 under the square root", RuntimeWarning
        )
    return total


def yolov1_grad(pred_tensor: Sequence[float], target: Yolo1Target, cfg: Yolo1Config) -> np.ndarray:
    """Gradient of yolov1_loss w.r.t. the flat prediction tensor.

    The responsible-box selection is held fixed; square-root size gradients
    use sizes clamped to >= 1e-9.
    """
    t = np.asarray(pred_tensor, dtype=np.float64)
    if t.shape != (cfg.tensor_length,):
        raise InvalidArgumentError(
            f"tensor length {t.size} != expected {cfg.tensor_length}"
        )
    grad = np.zeros_like(t)
    stride = cfg.cell_stride
    for i, boxes, class_scores in _yolo1_layout(cfg, t):
        base = i * stride
        tgt = target[i]
        if tgt is None:
            for k in range(cfg.boxes_b):
                grad[base + 5 * k + 4] += cfg.lambda_noobj * 2.0 * float(boxes[k, 4])
            continue
        j = _responsible_box(boxes, tgt.box)
        x, y, w, h, conf = (float(v) for v in boxes[j])
        o = base + 5 * j
        grad[o + 0] += cfg.lambda_coord * 2.0 * (x - tgt.box.cx)
        grad[o + 1] += cfg.lambda_coord * 2.0 * (y - tgt.box.cy)
        sw = math.sqrt(max(w, SQRT_EPS))
        sh = math.sqrt(max(h, SQRT_EPS))
        grad[o + 2] += cfg.lambda_coord * -(math.sqrt(max(tgt.box.w, 0.0)) - sw) / sw
        grad[o + 3] += cfg.lambda_coord * -(math.sqrt(max(tgt.box.h, 0.0)) - sh) / sh
        grad[o + 4] += 2.0 * (conf - 1.0)
        for k in range(cfg.boxes_b):
            if k != j:
                grad[base + 5 * k + 4] += cfg.lambda_noobj * 2.0 * float(boxes[k, 4])
        onehot = np.zeros(cfg.classes_c)
        onehot[tgt.class_id] = 1.0
        grad[base + 5 * cfg.boxes_b : base + stride] += 2.0 * (class_scores - onehot)
    return grad


# --------------------------------------------------------------------------
# SGD with momentum
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimState:
    """Parameter vector, velocity and the update hyper-parameters."""

    theta: np.ndarray
    velocity: np.ndarray
    momentum_beta: float = DEFAULT_MOMENTUM
    learning_rate_eta: float = 0.01

    def __post_init__(self):
        if self.theta.shape != self.velocity.shape:
            raise InvalidArgumentError("theta and velocity must have equal shapes")
        if not (0.0 <= self.momentum_beta < 1.0):
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if not self.learning_rate_eta > 0.0:
            raise InvalidArgumentError("learning rate must be > 0")

    @staticmethod
    def initial(theta: Sequence[float], momentum_beta: float = DEFAULT_MOMENTUM,
                learning_rate_eta: float = 0.01) -> "OptimState":
        th = np.asarray(theta, dtype=np.float64)
        return OptimState(th, np.zeros_like(th), momentum_beta, learning_rate_eta)


def sgd_momentum_step(
    state: OptimState, grad: Sequence[float], weight_decay_phi: float = 0.0
) -> OptimState:
    """One momentum update: V <- beta*V + (g + 2*phi*theta); theta <- theta - eta*V.

    The 2*phi*theta term is the gradient of the phi*||theta||^2 regulariser.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.theta.shape:
        raise InvalidArgumentError(f"grad shape {g.shape} != theta shape {state.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise InvalidArgumentError("gradient contains non-finite values")
    v = state.momentum_beta * state.velocity + (g + 2.0 * weight_decay_phi * state.theta)
    theta = state.theta - state.learning_rate_eta * v
    return OptimState(theta, v, state.momentum_beta, state.learning_rate_eta)


# --------------------------------------------------------------------------
# Box-fitting demonstration
# --------------------------------------------------------------------------


class FitPoint(NamedTuple):
    step: int
    loss: float
    iou: float


@dataclass
class FitResult:
    trajectory: list[FitPoint] = field(default_factory=list)
    final_box: BBox = BBox(0.0, 0.0, 0.0, 0.0)
    converged: bool = False


def fitbox(
    init: BBox,
    gt: BBox,
    eta: float,
    beta: float,
    max_steps: int,
    *,
    iou_stop: float = 0.995,
) -> FitResult:
    """Drive a box onto the target by momentum descent on the CIoU loss.

    Records (step, loss, iou) per step and stops once IoU >= iou_stop or
    max_steps is reached. Raises DivergedError (carrying the step index)
    when the parameters or the loss become non-finite.
    """
    if init.w <= 0 or init.h <= 0 or gt.w <= 0 or gt.h <= 0:
        raise InvalidArgumentError("boxes must have positive area")
    if eta <= 0:
        raise InvalidArgumentError("eta must be > 0")
    if not (0.0 <= beta < 1.0):
        raise InvalidArgumentError("beta must be in [0, 1)")
    if max_steps < 0:
        raise InvalidArgumentError("max_steps must be >= 0")

    theta = np.array([init.cx, init.cy, init.w, init.h], dtype=np.float64)
    velocity = np.zeros(4)
    result = FitResult()
    for step in range(max_steps + 1):
        if not np.all(np.isfinite(theta)):
            raise DivergedError(step)
        box = BBox(*(float(v) for v in theta))
        bd = ciou_breakdown(box, gt)
        loss = bd.ciou_loss
        if not math.isfinite(loss):
            raise DivergedError(step)
        result.trajectory.append(FitPoint(step, loss, bd.iou))
        if bd.iou >= iou_stop or step == max_steps:
            break
        velocity = beta * velocity + ciou_grad(box, gt)
        theta = theta - eta * velocity
    result.final_box = BBox(*(float(v) for v in theta))
    result.converged = result.trajectory[-1].iou >= iou_stop
    return result
