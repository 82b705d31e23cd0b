"""Mosaic augmentation: four labeled images composited into quadrants.

Crop placement comes from a SplitMix64 generator so the same seed produces
bit-identical output on every platform. Inputs smaller than their quadrant
are upscaled with nearest-neighbour sampling first (integer index mapping,
also platform-stable); labels are scaled, translated and clipped to their
quadrant, and slivers thinner than one pixel or smaller than one square
pixel are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .evaluation import GroundTruth
from .geometry import BBox, clip_to_rect

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64: 64-bit state, golden-gamma increment. Deterministic
    across platforms; used for crop placement only."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform-ish integer in [0, n); modulo bias is negligible for the
        pixel-sized ranges used here."""
        if n < 1:
            raise InvalidArgumentError("below() needs n >= 1")
        return self.next_u64() % n


@dataclass
class LabeledImage:
    """An (H, W, 3) uint8 raster plus labels in absolute pixel coordinates."""

    pixels: np.ndarray
    labels: list[GroundTruth] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class MosaicSpec:
    """Output size, fractional split point and the placement seed."""

    out_size: int = 640
    split_x: float = 0.5
    split_y: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.out_size < 2:
            raise InvalidArgumentError("out_size must be >= 2")
        for name in ("split_x", "split_y"):
            v = getattr(self, name)
            if not 0.25 <= v <= 0.75:
                raise InvalidArgumentError(f"{name} must be in [0.25, 0.75], got {v}")


def _check_image(img: LabeledImage, k: int) -> None:
    p = img.pixels
    if not isinstance(p, np.ndarray) or p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
        raise InvalidArgumentError(f"image {k}: pixels must be (H, W, 3) uint8")
    if p.shape[0] < 2 or p.shape[1] < 2:
        raise InvalidArgumentError(f"image {k}: must be at least 2x2 pixels")


def _nearest_upscale(img: LabeledImage, min_w: int, min_h: int):
    """Scale up (never down) so the raster covers at least min_w x min_h."""
    h, w = img.pixels.shape[:2]
    if w >= min_w and h >= min_h:
        return img.pixels, img.labels, w, h
    f = max(min_w / w, min_h / h)
    sw = max(min_w, math.ceil(w * f))
    sh = max(min_h, math.ceil(h * f))
    cols = np.minimum((np.arange(sw) * w) // sw, w - 1)
    rows = np.minimum((np.arange(sh) * h) // sh, h - 1)
    scaled = img.pixels[rows][:, cols]
    fx = sw / w
    fy = sh / h
    labels = [
        GroundTruth(BBox(g.box.cx * fx, g.box.cy * fy, g.box.w * fx, g.box.h * fy), g.class_id)
        for g in img.labels
    ]
    return scaled, labels, sw, sh


def mosaic(imgs: list[LabeledImage], spec: MosaicSpec) -> LabeledImage:
    """Composite four labeled images into one out_size x out_size mosaic.

    The canvas splits at (round(split_x * out_size), round(split_y * out_size));
    quadrant order is top-left, top-right, bottom-left, bottom-right, each
    filled with a uniformly-placed crop of its input (two seeded draws per
    quadrant: x offset, then y offset).
    """
    if len(imgs) != 4:
        raise InvalidArgumentError(f"mosaic needs exactly 4 images, got {len(imgs)}")
    for k, img in enumerate(imgs):
        _check_image(img, k)

    out = spec.out_size
    sx = min(max(int(round(spec.split_x * out)), 1), out - 1)
    sy = min(max(int(round(spec.split_y * out)), 1), out - 1)
    quadrants = [(0, 0, sx, sy), (sx, 0, out, sy), (0, sy, sx, out), (sx, sy, out, out)]

    rng = SplitMix64(spec.rng_seed)
    canvas = np.zeros((out, out, 3), dtype=np.uint8)
    out_labels: list[GroundTruth] = []
    for img, (qx1, qy1, qx2, qy2) in zip(imgs, quadrants):
        qw = qx2 - qx1
        qh = qy2 - qy1
        pixels, labels, sw, sh = _nearest_upscale(img, qw, qh)
        ox = rng.below(sw - qw + 1)
        oy = rng.below(sh - qh + 1)
        canvas[qy1:qy2, qx1:qx2] = pixels[oy : oy + qh, ox : ox + qw]
        for g in labels:
            moved = g.box.translate(qx1 - ox, qy1 - oy)
            clipped = clip_to_rect(moved, qx1, qy1, qx2, qy2)
            if clipped is None:
                continue
            if clipped.w < 1.0 or clipped.h < 1.0 or clipped.area < 1.0:
                continue
            out_labels.append(GroundTruth(clipped, g.class_id))
    return LabeledImage(canvas, out_labels)
