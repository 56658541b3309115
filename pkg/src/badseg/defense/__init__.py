from .beatrix import beatrix_detect
from .mitigation import abl_defense, finetune_defense, prune_defense
from .reports import DetectionReport, MitigationReport, auc, detection_set
from .strip import strip_detect
from .teco import teco_detect

__all__ = [
    "DetectionReport",
    "MitigationReport",
    "abl_defense",
    "auc",
    "beatrix_detect",
    "detection_set",
    "finetune_defense",
    "prune_defense",
    "strip_detect",
    "teco_detect",
]
