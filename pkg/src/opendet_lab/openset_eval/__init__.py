from .io import (AnnotationFormatError, Document, OpenSetRegistry, emit_annotations,
                 emit_detections, ingest_annotations, ingest_detections, load_registry)
from .metrics import (DetectionRecord, EvalReport, GroundTruthRecord, WildernessImpact, aose,
                      ap_unknown, average_precision, evaluate, iou, latent_statistics,
                      match_detections, precision_recall, wilderness_impact)
from .split import ContainmentMode, SplitShortfallError, SplitSpec, build_split, wilderness_ratio

__all__ = [
    "AnnotationFormatError", "ContainmentMode", "DetectionRecord", "Document", "EvalReport",
    "GroundTruthRecord", "OpenSetRegistry", "SplitShortfallError", "SplitSpec",
    "WildernessImpact", "aose", "ap_unknown", "average_precision", "build_split",
    "emit_annotations", "emit_detections", "evaluate", "ingest_annotations",
    "ingest_detections", "iou", "latent_statistics", "load_registry", "match_detections",
    "precision_recall", "wilderness_impact", "wilderness_ratio",
]
