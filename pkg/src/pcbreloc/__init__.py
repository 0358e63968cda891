"""Pose/class/box keyframe filtering for short-term relocalization."""
from .core import (
    Atlas, Detection, Frame, Keyframe, LocalMap, Pose, PoseSemanticDescriptor, SemanticMatrix,
    atlas_new_map, compute_psd, make_pose,
)
from .kpr import KprParams, Stage, Variant, baseline_l1, cb, class_score, frobenius_delta, iou, pcb
from .reloc import RelocParams, TrackingState, reloc_attempt, run_sequence
from .evaluate import ate_rmse, compare, summarize, umeyama_align

__version__ = "0.1.0"

__all__ = [
    "Atlas", "Detection", "Frame", "Keyframe", "LocalMap", "Pose", "PoseSemanticDescriptor",
    "SemanticMatrix", "atlas_new_map", "compute_psd", "make_pose",
    "KprParams", "Stage", "Variant", "baseline_l1", "cb", "class_score", "frobenius_delta", "iou", "pcb",
    "RelocParams", "TrackingState", "reloc_attempt", "run_sequence",
    "ate_rmse", "compare", "summarize", "umeyama_align",
]
