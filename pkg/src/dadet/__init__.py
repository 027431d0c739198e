"""Domain-adaptive object detection at desk scale.

Training couples a minimal two-stage detector with image- and object-level
domain classifiers behind an adversarial gradient reversal layer whose
strength adapts to sample hardness, plus a triplet regularizer against a
synthesized auxiliary rain domain.
"""

from .adversarial import (
    AdversarialConfig,
    Domain,
    advgrl_backward,
    advgrl_forward,
    compute_lambda_adv,
)
from .config import RunConfig
from .detector import Detector, DetectorConfig
from .evaluation import average_precision, compute_iou, mean_ap
from .training import LossReport, TrainConfig, run_training, total_loss

__all__ = [
    "AdversarialConfig",
    "Domain",
    "Detector",
    "DetectorConfig",
    "LossReport",
    "RunConfig",
    "TrainConfig",
    "advgrl_backward",
    "advgrl_forward",
    "average_precision",
    "compute_iou",
    "compute_lambda_adv",
    "mean_ap",
    "run_training",
    "total_loss",
]
