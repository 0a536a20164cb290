"""Non-neural machinery of a selective two-step (STC/STR) face detector."""

from .anchors import AnchorSet, PyramidConfig, anchor_count_stats, generate_pyramid_anchors
from .coding import LossConfig, decode, encode, focal_loss, total_loss
from .geometry import BoxXYXY, UndefinedIoUError, clip_box, iou, iou_matrix
from .matching import MatchResult, class_balance_stats, match_anchors
from .refine import Detection, Detections, StepScores, merge_multiscale, nms, run_inference, stc_filter, str_refine

__version__ = "0.1.0"
