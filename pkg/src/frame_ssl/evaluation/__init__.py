"""Downstream protocols on frozen features."""

from .drift import feature_drift_profile, write_drift_csv
from .metrics import Metrics, LabelSetError, box_size, jaccard_and_boundary, miou, pck
from .probe import LinearHead, fit_linear_head
from .propagation import PropagationConfig, PropagationResult, propagate_labels
from .report import write_bar_svg, write_metrics_csv
from .tracking import TrackResult, track_regions
from .zeroshot import zero_shot_classify

__all__ = [
    "Metrics",
    "LabelSetError",
    "LinearHead",
    "PropagationConfig",
    "PropagationResult",
    "TrackResult",
    "box_size",
    "feature_drift_profile",
    "fit_linear_head",
    "jaccard_and_boundary",
    "miou",
    "pck",
    "propagate_labels",
    "track_regions",
    "write_bar_svg",
    "write_drift_csv",
    "write_metrics_csv",
    "zero_shot_classify",
]
