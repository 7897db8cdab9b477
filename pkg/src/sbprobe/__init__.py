"""Robustness evaluation of soft-biometric privacy models.

Recovery probers try to restore suppressed attribute information, APEND
detects privacy-enhanced images, and the metrics module scores both.
"""
from .imaging import BinaryMask, FaceImage, PosteriorDistribution, Provenance, apply_mask, lp_distance
from .masks import ChessPatternConfig, MaskSchedule, aggregate_inpainted, build_schedule
from .metrics import RobustnessReport, arr, auc, identity_loss, pic, split_statistics, suppression_rate
from .recovery import VARIANTS, RecoveryPipeline, RecoveryToolkit, run_pipeline
from .detection import DetectorConfig, apend_score, dds_chi_square, evaluate_detector, fuse_with_supervised

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "FaceImage", "PosteriorDistribution", "Provenance", "apply_mask", "lp_distance",
    "ChessPatternConfig", "MaskSchedule", "aggregate_inpainted", "build_schedule",
    "RobustnessReport", "arr", "auc", "identity_loss", "pic", "split_statistics", "suppression_rate",
    "VARIANTS", "RecoveryPipeline", "RecoveryToolkit", "run_pipeline",
    "DetectorConfig", "apend_score", "dds_chi_square", "evaluate_detector", "fuse_with_supervised",
]
