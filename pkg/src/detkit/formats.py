"""File formats: YOLO-style annotation text, P6 PPM rasters, report JSON.

Annotation grammar (one object per line, whitespace separated):

    class_id cx cy w h              ground truth
    class_id cx cy w h confidence   prediction

Coordinates are center-form, normalised to [0, 1] by the image dimensions;
confidence is in [0, 1]. Canonical emission uses six decimal places, single
spaces and LF line endings; both LF and CRLF are accepted on parse. Blank
lines are ignored. See docs/formats.md for the full grammar.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, ParseError, PpmFormatError
from .evaluation import EvalReport, GroundTruth
from .geometry import BBox
from .losses import LossReport
from .postprocess import Detection

PathLike = Union[str, Path]


# --------------------------------------------------------------------------
# Annotation / prediction text files
# --------------------------------------------------------------------------


def _parse_lines(path: PathLike, text: str, with_confidence: bool,
                 num_classes: Optional[int]):
    n_fields = 6 if with_confidence else 5
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != n_fields:
            raise ParseError(path, lineno, f"expected {n_fields} fields, got {len(tokens)}")
        try:
            class_id = int(tokens[0])
        except ValueError:
            raise ParseError(path, lineno, f"class id {tokens[0]!r} is not an integer") from None
        if class_id < 0:
            raise ParseError(path, lineno, f"class id {class_id} is negative")
        if num_classes is not None and class_id >= num_classes:
            raise ParseError(
                path, lineno, f"class id {class_id} outside class table (size {num_classes})"
            )
        try:
            values = [float(t) for t in tokens[1:]]
        except ValueError:
            raise ParseError(path, lineno, "malformed numeric field") from None
        for name, v in zip(("cx", "cy", "w", "h", "confidence"), values):
            if not math.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ParseError(path, lineno, f"{name} = {v} outside [0, 1]")
        yield lineno, class_id, values


def parse_annotations(
    path: PathLike,
    image_w: float,
    image_h: float,
    num_classes: Optional[int] = None,
) -> list[GroundTruth]:
    """Parse a ground-truth file into absolute-pixel boxes."""
    if not (image_w > 0 and image_h > 0):
        raise InvalidArgumentError("image dimensions must be > 0")
    text = Path(path).read_text(encoding="utf-8")
    return [
        GroundTruth(BBox(cx * image_w, cy * image_h, w * image_w, h * image_h), cid)
        for _, cid, (cx, cy, w, h) in _parse_lines(path, text, False, num_classes)
    ]


def parse_predictions(
    path: PathLike,
    image_w: float,
    image_h: float,
    num_classes: Optional[int] = None,
) -> list[Detection]:
    """Parse a prediction file into absolute-pixel detections."""
    if not (image_w > 0 and image_h > 0):
        raise InvalidArgumentError("image dimensions must be > 0")
    text = Path(path).read_text(encoding="utf-8")
    return [
        Detection(BBox(cx * image_w, cy * image_h, w * image_w, h * image_h), cid, conf)
        for _, cid, (cx, cy, w, h, conf) in _parse_lines(path, text, True, num_classes)
    ]


def _normalised(value: float, extent: float, what: str) -> float:
    v = value / extent
    if not -1e-6 <= v <= 1.0 + 1e-6:
        raise InvalidArgumentError(f"{what} = {v} not normalisable to [0, 1]")
    return min(max(v, 0.0), 1.0)


def emit_annotations(gts: Sequence[GroundTruth], image_w: float, image_h: float) -> str:
    """Canonical annotation text (6 decimals, LF) from absolute-pixel boxes."""
    lines = []
    for g in gts:
        cx = _normalised(g.box.cx, image_w, "cx")
        cy = _normalised(g.box.cy, image_h, "cy")
        w = _normalised(g.box.w, image_w, "w")
        h = _normalised(g.box.h, image_h, "h")
        lines.append(f"{g.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")
    return "".join(lines)


def emit_predictions(dets: Sequence[Detection], image_w: float, image_h: float) -> str:
    """Canonical prediction text from absolute-pixel detections."""
    lines = []
    for d in dets:
        cx = _normalised(d.box.cx, image_w, "cx")
        cy = _normalised(d.box.cy, image_h, "cy")
        w = _normalised(d.box.w, image_w, "w")
        h = _normalised(d.box.h, image_h, "h")
        if not 0.0 <= d.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence {d.confidence} outside [0, 1]")
        lines.append(
            f"{d.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} {d.confidence:.6f}\n"
        )
    return "".join(lines)


def write_annotations(path: PathLike, gts, image_w: float, image_h: float) -> None:
    Path(path).write_text(emit_annotations(gts, image_w, image_h), encoding="utf-8")


def write_predictions(path: PathLike, dets, image_w: float, image_h: float) -> None:
    Path(path).write_text(emit_predictions(dets, image_w, image_h), encoding="utf-8")


def read_classes(path: PathLike) -> list[str]:
    """Class table: one name per line, index = class id; blanks ignored."""
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if not names:
        raise ParseError(path, None, "class table is empty")
    return names


def read_size_sidecar(path: PathLike) -> tuple[int, int]:
    """Sidecar "W H" file giving image dimensions without an image."""
    tokens = Path(path).read_text(encoding="utf-8").split()
    if len(tokens) != 2:
        raise ParseError(path, 1, f"expected 'W H', got {len(tokens)} fields")
    try:
        w, h = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise ParseError(path, 1, "dimensions must be integers") from None
    if w <= 0 or h <= 0:
        raise ParseError(path, 1, f"dimensions must be positive, got {w}x{h}")
    return w, h


# --------------------------------------------------------------------------
# Binary P6 PPM (maxval 255)
# --------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int, path: PathLike) -> tuple[list[bytes], int]:
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise PpmFormatError(f"{path}: truncated header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    return tokens, i


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise PpmFormatError(f"{path}: not a binary P6 PPM")
    tokens, offset = _ppm_tokens(data, 4, path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise PpmFormatError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0:
        raise PpmFormatError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise PpmFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    # Exactly one whitespace byte separates the header from the payload.
    payload = data[offset + 1 :]
    need = w * h * 3
    if len(payload) < need:
        raise PpmFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm_dimensions(path: PathLike) -> tuple[int, int]:
    """(W, H) from a PPM header without validating the payload."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise PpmFormatError(f"{path}: not a binary P6 PPM")
    tokens, _ = _ppm_tokens(data, 3, path)
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise PpmFormatError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0:
        raise PpmFormatError(f"{path}: invalid dimensions {w}x{h}")
    return w, h


def write_ppm(path: PathLike, raster: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as canonical binary P6."""
    r = np.asarray(raster)
    if r.dtype != np.uint8 or r.ndim != 3 or r.shape[2] != 3:
        raise InvalidArgumentError(f"raster must be (H, W, 3) uint8, got {r.dtype} {r.shape}")
    h, w = r.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + r.tobytes())


# --------------------------------------------------------------------------
# Report JSON / CSV (stable key order, fixed 6-decimal floats)
# --------------------------------------------------------------------------


def _json_fmt(value, indent: int = 0) -> str:
    pad = "  " * indent
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        inner = ",\n".join("  " * (indent + 1) + _json_fmt(v, indent + 1) for v in value)
        return "[\n" + inner + "\n" + pad + "]"
    if isinstance(value, dict):
        if not value:
            return "{}"
        inner = ",\n".join(
            "  " * (indent + 1) + json.dumps(k) + ": " + _json_fmt(v, indent + 1)
            for k, v in value.items()
        )
        return "{\n" + inner + "\n" + pad + "}"
    raise InvalidArgumentError(f"cannot serialise {type(value).__name__}")


def report_to_json(report: EvalReport, class_names: Optional[Sequence[str]] = None) -> str:
    """Serialise an EvalReport with stable keys and 6-decimal numbers."""
    per_class = []
    for entry in report.per_class:
        item: dict = {"class_id": entry.class_id}
        if class_names is not None and 0 <= entry.class_id < len(class_names):
            item["name"] = class_names[entry.class_id]
        item["n_gt"] = entry.n_gt
        item["n_pred"] = entry.n_pred
        item["ap_by_threshold"] = [float(a) for a in entry.ap_by_threshold]
        item["ap"] = float(entry.ap)
        per_class.append(item)
    doc = {
        "counts": {
            "images": report.n_images,
            "ground_truths": report.n_gt,
            "predictions": report.n_predictions,
        },
        "thresholds": [float(t) for t in report.thresholds],
        "per_class": per_class,
        "map50": report.map50,
        "map50_95": report.map50_95,
    }
    return _json_fmt(doc) + "\n"


def emit_report(report: EvalReport, path: PathLike,
                class_names: Optional[Sequence[str]] = None) -> None:
    Path(path).write_text(report_to_json(report, class_names), encoding="utf-8")


def loss_report_to_json(report: LossReport) -> str:
    doc = {
        "total": float(report.total),
        "box_term": float(report.box_term),
        "cls_term": float(report.cls_term),
        "dfl_term": float(report.dfl_term),
        "n_pos": int(report.n_pos),
    }
    return _json_fmt(doc) + "\n"


def confusion_to_csv(matrix: np.ndarray, class_names: Sequence[str]) -> str:
    """CSV with ground-truth rows, prediction columns, background last."""
    size = len(class_names) + 1
    if matrix.shape != (size, size):
        raise InvalidArgumentError(
            f"matrix shape {matrix.shape} does not fit {len(class_names)} classes"
        )
    labels = [*class_names, "background"]
    is_float = np.issubdtype(matrix.dtype, np.floating)
    rows = ["gt\\pred," + ",".join(labels)]
    for i, label in enumerate(labels):
        cells = (f"{v:.6f}" if is_float else str(int(v)) for v in matrix[i])
        rows.append(label + "," + ",".join(cells))
    return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# Dataset directory walking
# --------------------------------------------------------------------------


@dataclass
class EvalDataset:
    """Parsed dataset: aligned per-image lists plus skipped-file diagnostics."""

    stems: list[str] = field(default_factory=list)
    image_sizes: dict = field(default_factory=dict)
    gts_by_image: list = field(default_factory=list)
    preds_by_image: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def image_dimensions(stem: str, gt_dir: Path, images_dir: Optional[Path]) -> tuple[int, int]:
    """Dimensions from images/<stem>.ppm, else the <stem>.size sidecar."""
    if images_dir is not None:
        ppm = images_dir / f"{stem}.ppm"
        if ppm.exists():
            return read_ppm_dimensions(ppm)
    sidecar = gt_dir / f"{stem}.size"
    if sidecar.exists():
        return read_size_sidecar(sidecar)
    raise ParseError(
        gt_dir / f"{stem}.size", None,
        "no image or size sidecar to provide dimensions",
    )


def load_eval_dataset(
    gt_dir: PathLike,
    pred_dir: PathLike,
    num_classes: int,
    images_dir: Optional[PathLike] = None,
) -> EvalDataset:
    """Walk aligned label/prediction directories.

    Every *.txt stem under gt_dir is an image; a missing prediction file
    means no detections. Prediction stems without a label stem raise. Files
    that fail to parse are skipped and recorded in diagnostics (sorted),
    never silently dropped.
    """
    gt_dir = Path(gt_dir)
    pred_dir = Path(pred_dir)
    images_dir = Path(images_dir) if images_dir is not None else None
    if not gt_dir.is_dir():
        raise InvalidArgumentError(f"ground-truth directory not found: {gt_dir}")
    if not pred_dir.is_dir():
        raise InvalidArgumentError(f"prediction directory not found: {pred_dir}")

    stems = sorted(p.stem for p in gt_dir.glob("*.txt"))
    extra = sorted(set(p.stem for p in pred_dir.glob("*.txt")) - set(stems))
    if extra:
        raise InvalidArgumentError(
            "prediction stems without ground truth: " + ", ".join(extra)
        )

    ds = EvalDataset()
    for stem in stems:
        try:
            w, h = image_dimensions(stem, gt_dir, images_dir)
            gts = parse_annotations(gt_dir / f"{stem}.txt", w, h, num_classes)
            pred_path = pred_dir / f"{stem}.txt"
            preds = (
                parse_predictions(pred_path, w, h, num_classes)
                if pred_path.exists()
                else []
            )
        except (ParseError, PpmFormatError) as exc:
            ds.diagnostics.append(str(exc))
            continue
        ds.stems.append(stem)
        ds.image_sizes[stem] = (w, h)
        ds.gts_by_image.append(gts)
        ds.preds_by_image.append(preds)
    ds.diagnostics.sort()
    return ds
