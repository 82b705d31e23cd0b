"""Framework-independent object-detection math toolkit.

Box geometry and CIoU terms, the composite detection loss with analytic
gradients, SGD with momentum, anchor-free decoding, NMS and Soft-NMS,
mosaic augmentation, a COCO-style mAP50-95 evaluator, and the text/PPM
file formats that tie them together behind the ``detkit`` CLI.
"""

from .augment import LabeledImage, MosaicSpec, SplitMix64, mosaic
from .errors import (
    DetkitError,
    DivergedError,
    InvalidArgumentError,
    ParseError,
    PpmFormatError,
)
from .evaluation import (
    ClassAP,
    EvalConfig,
    EvalReport,
    GroundTruth,
    MatchResult,
    average_precision,
    confusion_matrix,
    iou_thresholds,
    map_50_95,
    match_detections,
    precision,
)
from .geometry import BBox, IoUBreakdown, ciou_breakdown, ciou_loss, iou
from .losses import (
    DEFAULT_LAMBDA_BOX,
    DEFAULT_LAMBDA_CLS,
    DEFAULT_LAMBDA_DFL,
    DEFAULT_MOMENTUM,
    DEFAULT_REG_MAX,
    DEFAULT_WEIGHT_DECAY,
    CellGradient,
    CellPrediction,
    CellTarget,
    FitResult,
    LossReport,
    LossWeights,
    OptimState,
    Yolo1CellTarget,
    Yolo1Config,
    bce_grad,
    bce_loss,
    ciou_grad,
    composite_loss,
    composite_loss_grad,
    dfl_grad,
    dfl_loss,
    fitbox,
    sgd_momentum_step,
    yolov1_grad,
    yolov1_loss,
)
from .postprocess import (
    Detection,
    GridSpec,
    confidence_filter,
    decode_anchor_free,
    nms,
    soft_nms,
)

__version__ = "0.1.0"
