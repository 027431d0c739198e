"""Detection-quality metrics (per-class AP / mAP at a fixed IoU) and hardness mining.

AP uses greedy confidence-ranked matching with one ground-truth consumed per
true positive, and integrates the all-point interpolated precision-recall
curve in exact rational arithmetic so results are reproducible to the bit.
Hardness mining scores aligned source/target pairs by the mean absolute
difference of their backbone features and ranks ascending: the smaller the
score, the harder the pair is treated for transfer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .detector import Box, Detection
from .errors import ContractError

INTERPOLATION_SCHEME = "all-point"


@dataclass
class EvalResult:
    """Per-class AP (None when the class has no ground truth) plus their mean."""

    per_class_ap: dict[str, float | None]
    mean_ap: float
    iou_threshold: float
    interpolation: str = INTERPOLATION_SCHEME
    detection_count: int = 0


@dataclass(frozen=True)
class HardnessRecord:
    image_id: str
    ah: float
    rank: int


def compute_iou(a: Box, b: Box) -> float:
    """Intersection area over union area; degenerate boxes contribute 0."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def match_detections(
    detections: Sequence[tuple[str, float, Box]],
    groundtruth: Mapping[str, Sequence[Box]],
    iou_threshold: float,
) -> list[int]:
    """Greedy TP/FP flags for detections processed by descending confidence.

    Each detection claims the first maximal-IoU unmatched ground-truth box in
    its image when that IoU reaches the threshold; every ground-truth box can
    be matched once.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = {img: [False] * len(boxes) for img, boxes in groundtruth.items()}
    flags = [0] * len(detections)
    for idx in order:
        image_id, _, box = detections[idx]
        gt_boxes = groundtruth.get(image_id, ())
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            iou = compute_iou(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold and not matched[image_id][best_j]:
            matched[image_id][best_j] = True
            flags[idx] = 1
    return [flags[i] for i in order]


def average_precision(
    detections: Sequence[tuple[str, float, Box]],
    groundtruth: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> float | None:
    """All-point interpolated AP for one class; None when no ground truth exists.

    detections are (image_id, confidence, box) triples; groundtruth maps
    image_id to that class's boxes. The PR curve is integrated as
    sum(delta_recall * max precision at or after the point), evaluated in
    exact rationals before the final float conversion.
    """
    npos = sum(len(boxes) for boxes in groundtruth.values())
    if npos == 0:
        return None
    if not detections:
        return 0.0
    flags = match_detections(detections, groundtruth, iou_threshold)
    precisions: list[Fraction] = []
    tp_cum = 0
    for k, is_tp in enumerate(flags):
        tp_cum += is_tp
        precisions.append(Fraction(tp_cum, k + 1))
    ap = Fraction(0)
    for k, is_tp in enumerate(flags):
        if is_tp:
            ap += max(precisions[k:]) * Fraction(1, npos)
    return float(ap)


def mean_ap(per_class_ap: Mapping[str, float | None]) -> float:
    """Arithmetic mean over classes whose AP is defined."""
    defined = [ap for ap in per_class_ap.values() if ap is not None]
    if not defined:
        raise ContractError("mAP is undefined: no class has ground truth")
    return float(sum(defined) / len(defined))


def evaluate_detections(
    samples: Sequence[tuple[str, Sequence[Detection], Sequence]],
    categories: Sequence[str],
    iou_threshold: float = 0.5,
) -> EvalResult:
    """Per-class AP and mAP over (image_id, detections, annotations) samples."""
    per_class: dict[str, float | None] = {}
    total_detections = 0
    for category in categories:
        dets: list[tuple[str, float, Box]] = []
        gts: dict[str, list[Box]] = {}
        for image_id, detections, annotations in samples:
            gts[image_id] = [a.box for a in annotations if a.category == category]
            for det in detections:
                if det.category == category:
                    dets.append((image_id, det.confidence, det.box))
        total_detections += len(dets)
        per_class[category] = average_precision(dets, gts, iou_threshold)
    return EvalResult(
        per_class_ap=per_class,
        mean_ap=mean_ap(per_class),
        iou_threshold=iou_threshold,
        detection_count=total_detections,
    )


def approximated_hardness(f_source, f_target) -> float:
    """Mean absolute difference between aligned feature maps; smaller is harder."""
    a = f_source.activations if hasattr(f_source, "activations") else f_source
    b = f_target.activations if hasattr(f_target, "activations") else f_target
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        return float((a - b).abs().mean())


def mine_hard_examples(
    paired_dataset: Sequence[tuple[str, np.ndarray, np.ndarray]],
    extract_features: Callable[[np.ndarray], object],
    k: int,
) -> list[HardnessRecord]:
    """Rank aligned (source, target) image pairs by ascending hardness score.

    Returns the k hardest pairs (smallest mean absolute feature difference).
    Asking for more records than pairs returns everything with a warning.
    """
    if k > len(paired_dataset):
        warnings.warn(
            f"requested {k} hard examples but only {len(paired_dataset)} pairs exist"
        )
        k = len(paired_dataset)
    scored = []
    for image_id, src, tgt in paired_dataset:
        ah = approximated_hardness(extract_features(src), extract_features(tgt))
        scored.append((image_id, ah))
    scored.sort(key=lambda item: item[1])
    return [
        HardnessRecord(image_id=image_id, ah=ah, rank=rank + 1)
        for rank, (image_id, ah) in enumerate(scored[:k])
    ]
