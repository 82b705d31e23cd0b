"""Command-line front end: detkit <subcommand>.

Exit codes: 0 success, 1 validation or parse errors, 2 internal errors.
Diagnostics go to stderr; results go to stdout or the --out file.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import augment, evaluation, formats, gradcheck, losses, postprocess
from .errors import DetkitError, DivergedError, InvalidArgumentError
from .geometry import BBox


class _Parser(argparse.ArgumentParser):
    # Flag/usage errors are validation errors: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_box(text: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise InvalidArgumentError(f"box must be 'cx,cy,w,h', got {text!r}")
    try:
        return BBox(*(float(p) for p in parts))
    except ValueError:
        raise InvalidArgumentError(f"box must be numeric 'cx,cy,w,h', got {text!r}") from None


def _write_result(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _cmd_eval(args) -> int:
    classes_path = Path(args.classes)
    if not classes_path.is_file():
        print(f"error: classes file not found: {classes_path}", file=sys.stderr)
        return 1
    class_names = formats.read_classes(classes_path)
    cfg = evaluation.EvalConfig(
        iou_min=args.iou_min,
        iou_max=args.iou_max,
        iou_step=args.iou_step,
        confusion_iou=args.confusion_iou,
        confusion_conf=args.confusion_conf,
        strict=args.strict_gt,
    )
    ds = formats.load_eval_dataset(
        args.gt, args.pred, len(class_names), images_dir=args.images
    )
    for line in ds.diagnostics:
        print(f"skipped: {line}", file=sys.stderr)
    if ds.diagnostics:
        return 1
    report = evaluation.map_50_95(
        ds.gts_by_image, ds.preds_by_image, cfg,
        num_classes=len(class_names), threads=args.threads,
    )
    formats.emit_report(report, args.out, class_names)
    if args.confusion:
        counts, normalised = evaluation.confusion_matrix(
            ds.gts_by_image, ds.preds_by_image, cfg, len(class_names)
        )
        base = Path(args.out)
        base.with_suffix(".confusion.csv").write_text(
            formats.confusion_to_csv(counts, class_names), encoding="utf-8"
        )
        base.with_suffix(".confusion_normalized.csv").write_text(
            formats.confusion_to_csv(normalised, class_names), encoding="utf-8"
        )
    m50 = "n/a" if report.map50 is None else f"{report.map50:.6f}"
    m5095 = "n/a" if report.map50_95 is None else f"{report.map50_95:.6f}"
    print(f"mAP50={m50} mAP50-95={m5095}")
    return 0


# --------------------------------------------------------------------------
# nms / soft-nms
# --------------------------------------------------------------------------


def _load_predictions(args) -> list[postprocess.Detection]:
    num_classes = None
    if args.classes:
        num_classes = len(formats.read_classes(args.classes))
    # IoU is invariant under per-image scaling, so normalised coordinates
    # (unit image) are used directly.
    return formats.parse_predictions(args.pred, 1.0, 1.0, num_classes)


def _cmd_nms(args) -> int:
    dets = _load_predictions(args)
    if args.conf > 0:
        dets = postprocess.confidence_filter(dets, args.conf)
    kept = postprocess.nms(dets, args.iou_threshold, class_agnostic=args.class_agnostic)
    _write_result(formats.emit_predictions(kept, 1.0, 1.0), args.out)
    print(f"kept {len(kept)} of {len(dets)} detections", file=sys.stderr)
    return 0


def _cmd_soft_nms(args) -> int:
    dets = _load_predictions(args)
    kept = postprocess.soft_nms(
        dets,
        method=args.method,
        iou_threshold=args.nt,
        sigma=args.sigma,
        score_floor=args.score_floor,
    )
    _write_result(formats.emit_predictions(kept, 1.0, 1.0), args.out)
    print(f"kept {len(kept)} of {len(dets)} detections", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# mosaic
# --------------------------------------------------------------------------


def _cmd_mosaic(args) -> int:
    inputs = []
    for img_path, label_path in zip(args.images, args.labels):
        pixels = formats.read_ppm(img_path)
        h, w = pixels.shape[:2]
        labels = formats.parse_annotations(label_path, w, h)
        inputs.append(augment.LabeledImage(pixels, labels))
    spec = augment.MosaicSpec(
        out_size=args.size, split_x=args.split_x, split_y=args.split_y,
        rng_seed=args.seed,
    )
    result = augment.mosaic(inputs, spec)
    formats.write_ppm(args.out_image, result.pixels)
    formats.write_annotations(args.out_labels, result.labels, args.size, args.size)
    print(f"mosaic {args.size}x{args.size} with {len(result.labels)} labels")
    return 0


# --------------------------------------------------------------------------
# loss / decode
# --------------------------------------------------------------------------


def _cells_from_json(doc) -> list[tuple[losses.CellPrediction, losses.CellTarget]]:
    if "cells" not in doc or not isinstance(doc["cells"], list):
        raise InvalidArgumentError("cells JSON must contain a 'cells' list")
    cells = []
    for i, c in enumerate(doc["cells"]):
        try:
            pred = losses.CellPrediction(
                class_logits=np.asarray(c["class_logits"], dtype=np.float64),
                dist_logits=np.asarray(c["dist_logits"], dtype=np.float64),
                decoded_box=BBox(*(float(v) for v in c["decoded_box"])),
            )
            t = c["target"]
            if t["has_object"]:
                tgt = losses.CellTarget(
                    True,
                    np.asarray(t["class_labels"], dtype=np.float64),
                    BBox(*(float(v) for v in t["gt_box"])),
                    np.asarray(t["dfl_target"], dtype=np.float64),
                )
            else:
                tgt = losses.CellTarget(
                    False, np.asarray(t["class_labels"], dtype=np.float64)
                )
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"cell {i}: missing or malformed field {exc}") from None
        cells.append((pred, tgt))
    return cells


def _cmd_loss(args) -> int:
    try:
        doc = json.loads(Path(args.cells).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{args.cells}: invalid JSON ({exc})") from None
    cells = _cells_from_json(doc)
    weights = losses.LossWeights(
        lambda_box=args.lambda_box,
        lambda_cls=args.lambda_cls,
        lambda_dfl=args.lambda_dfl,
        weight_decay_phi=args.weight_decay,
    )
    report = losses.composite_loss(cells, weights)
    _write_result(formats.loss_report_to_json(report), args.out)
    return 0


def _cmd_decode(args) -> int:
    try:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{args.input}: invalid JSON ({exc})") from None
    try:
        g = doc["grid"]
        grid = postprocess.GridSpec(int(g["cols"]), int(g["rows"]), float(g["stride"]))
        entries = doc["cells"]
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"decode JSON missing field {exc}") from None
    out = []
    for i, entry in enumerate(entries):
        try:
            col, row = (int(v) for v in entry["cell"])
            logits = np.asarray(entry["dist_logits"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"cell {i}: malformed entry ({exc})") from None
        box = postprocess.decode_anchor_free((col, row), logits, grid)
        out.append({"cell": [col, row], "box": [box.cx, box.cy, box.w, box.h]})
    _write_result(formats._json_fmt(out) + "\n", args.out)
    return 0


# --------------------------------------------------------------------------
# gradcheck / fitbox
# --------------------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(args.loss, args.trials, args.seed, args.step)
    for name, group in report.groups.items():
        print(
            f"group={name} max_rel_dev={group.max_deviation:.3e} "
            f"trial={group.trial} index={group.index} "
            f"analytic={group.analytic:.9g} numeric={group.numeric:.9g}"
        )
    if report.passed(args.tol):
        print(f"gradcheck loss={args.loss} trials={args.trials} tol={args.tol:g}: PASS")
        return 0
    name, worst = report.worst()
    print(f"gradcheck loss={args.loss} trials={args.trials} tol={args.tol:g}: FAIL")
    print(
        f"error: worst offender group={name} trial={worst.trial} index={worst.index} "
        f"analytic={worst.analytic:.9g} numeric={worst.numeric:.9g} "
        f"deviation={worst.max_deviation:.3e}",
        file=sys.stderr,
    )
    return 1


def _cmd_fitbox(args) -> int:
    init = _parse_box(args.init)
    gt = _parse_box(args.gt)
    try:
        result = losses.fitbox(init, gt, args.eta, args.beta, args.steps)
    except DivergedError as exc:
        print(f"error: diverged at step {exc.step}", file=sys.stderr)
        return 1
    if args.csv:
        rows = ["step,loss,iou"]
        rows += [f"{p.step},{p.loss:.9g},{p.iou:.9g}" for p in result.trajectory]
        Path(args.csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    last = result.trajectory[-1]
    print(f"steps={last.step} loss={last.loss:.6f} iou={last.iou:.6f} "
          f"converged={'yes' if result.converged else 'no'}")
    return 0


# --------------------------------------------------------------------------
# parser wiring
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="detkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--classes", required=True, help="class table (one name per line)")
    p.add_argument("--images", default=None, help="image directory for dimensions")
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--iou-max", type=float, default=0.95)
    p.add_argument("--iou-step", type=float, default=0.05)
    p.add_argument("--strict-gt", action="store_true",
                   help="require IoU strictly greater than the threshold")
    p.add_argument("--confusion", action="store_true",
                   help="also write confusion CSVs next to --out")
    p.add_argument("--confusion-iou", type=float, default=0.5)
    p.add_argument("--confusion-conf", type=float, default=0.25)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("nms", help="non-maximum suppression over a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--classes", default=None)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.0, help="pre-filter threshold")
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_nms)

    p = sub.add_parser("soft-nms", help="soft non-maximum suppression")
    p.add_argument("--pred", required=True)
    p.add_argument("--classes", default=None)
    p.add_argument("--method", choices=("linear", "gaussian"), default="linear")
    p.add_argument("--nt", type=float, default=0.3, help="linear overlap threshold")
    p.add_argument("--sigma", type=float, default=0.5, help="gaussian decay scale")
    p.add_argument("--score-floor", type=float, default=0.001)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_soft_nms)

    p = sub.add_parser("mosaic", help="compose a 4-image mosaic with labels")
    p.add_argument("--images", nargs=4, required=True, metavar="PPM")
    p.add_argument("--labels", nargs=4, required=True, metavar="TXT")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--split-x", type=float, default=0.5)
    p.add_argument("--split-y", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_mosaic)

    p = sub.add_parser("loss", help="composite loss over a cells JSON file")
    p.add_argument("--cells", required=True, help="cells JSON (see docs/formats.md)")
    p.add_argument("--lambda-box", type=float, default=losses.DEFAULT_LAMBDA_BOX)
    p.add_argument("--lambda-cls", type=float, default=losses.DEFAULT_LAMBDA_CLS)
    p.add_argument("--lambda-dfl", type=float, default=losses.DEFAULT_LAMBDA_DFL)
    p.add_argument("--weight-decay", type=float, default=losses.DEFAULT_WEIGHT_DECAY)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--loss", choices=gradcheck.LOSS_NAMES, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("fitbox", help="fit a box to a target by momentum descent")
    p.add_argument("--init", required=True, metavar="cx,cy,w,h")
    p.add_argument("--gt", required=True, metavar="cx,cy,w,h")
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--csv", default=None, help="write per-step step,loss,iou CSV")
    p.set_defaults(func=_cmd_fitbox)

    p = sub.add_parser("decode", help="decode distance distributions to boxes")
    p.add_argument("--input", required=True, help="grid + cells JSON")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_decode)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedError as exc:
        print(f"error: diverged at step {exc.step}", file=sys.stderr)
        return 1
    except (DetkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
