"""Axis-aligned bounding-box arithmetic: IoU and the CIoU penalty terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidArgumentError

# Height clamp for the aspect-ratio term: keeps arctan(w/h) defined for the
# degenerate slivers that augmentation clipping can produce.
ASPECT_EPS = 1e-9
# Floor for the enclosing-box diagonal, zero only when both boxes collapse
# onto the same point.
DIAG_EPS = 1e-12

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center form (cx, cy, w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        """Corner form (x1, y1, x2, y2)."""
        hw = self.w / 2
        hh = self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return BBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def is_finite(self) -> bool:
        return (
            math.isfinite(self.cx)
            and math.isfinite(self.cy)
            and math.isfinite(self.w)
            and math.isfinite(self.h)
        )


@dataclass(frozen=True)
class IoUBreakdown:
    """IoU plus every CIoU sub-quantity for one (pred, gt) pair.

    ``alpha`` is the aspect-ratio trade-off nu / (1 - iou), defined as 0 when
    iou = 1 (nu also vanishes there) so alpha * nu is always well defined.
    """

    iou: float
    center_dist_sq: float
    enclosing_diag_sq: float
    nu: float
    alpha: float

    @property
    def ciou_loss(self) -> float:
        return (
            1.0
            - self.iou
            + self.center_dist_sq / self.enclosing_diag_sq
            + self.alpha * self.nu
        )


def _check_finite(box: BBox, name: str) -> None:
    if not box.is_finite():
        raise InvalidArgumentError(f"{name} has non-finite coordinates: {box}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; zero-area boxes give 0."""
    _check_finite(a, "a")
    _check_finite(b, "b")
    return _iou_corners(a.corners(), b.corners())


def _iou_corners(
    ca: tuple[float, float, float, float], cb: tuple[float, float, float, float]
) -> float:
    ax1, ay1, ax2, ay2 = ca
    bx1, by1, bx2, by2 = cb
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def aspect_term(gt_w: float, gt_h: float, pred_w: float, pred_h: float) -> float:
    """Aspect-ratio consistency nu = (4/pi^2)(arctan(w/h) - arctan(w'/h'))^2."""
    gh = max(gt_h, ASPECT_EPS)
    ph = max(pred_h, ASPECT_EPS)
    d = math.atan(gt_w / gh) - math.atan(pred_w / ph)
    return _FOUR_OVER_PI_SQ * d * d


def ciou_breakdown(pred: BBox, gt: BBox) -> IoUBreakdown:
    """Compute IoU, squared center distance, enclosing diagonal, nu and alpha."""
    _check_finite(pred, "pred")
    _check_finite(gt, "gt")
    q = _iou_corners(pred.corners(), gt.corners())
    dx = pred.cx - gt.cx
    dy = pred.cy - gt.cy
    dist = dx * dx + dy * dy
    px1, py1, px2, py2 = pred.corners()
    gx1, gy1, gx2, gy2 = gt.corners()
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    diag = max(cw * cw + ch * ch, DIAG_EPS)
    nu = aspect_term(gt.w, gt.h, pred.w, pred.h)
    if q >= 1.0 or nu == 0.0:
        alpha = 0.0
    else:
        alpha = nu / (1.0 - q)
    return IoUBreakdown(q, dist, diag, nu, alpha)


def ciou_loss(pred: BBox, gt: BBox, alpha: float | None = None) -> float:
    """CIoU loss 1 - IoU + dist/diag + alpha*nu.

    ``alpha`` overrides the trade-off coefficient; gradient checking pins it
    to the value at the expansion point because no gradient flows through it.
    """
    b = ciou_breakdown(pred, gt)
    a = b.alpha if alpha is None else alpha
    return 1.0 - b.iou + b.center_dist_sq / b.enclosing_diag_sq + a * b.nu


def clip_to_rect(
    box: BBox, x1: float, y1: float, x2: float, y2: float
) -> BBox | None:
    """Clip a box to a rectangle; None when nothing remains."""
    bx1, by1, bx2, by2 = box.corners()
    cx1 = max(bx1, x1)
    cy1 = max(by1, y1)
    cx2 = min(bx2, x2)
    cy2 = min(by2, y2)
    if cx2 <= cx1 or cy2 <= cy1:
        return None
    return BBox.from_corners(cx1, cy1, cx2, cy2)
