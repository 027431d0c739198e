"""Minimal two-stage detector exposing the feature taps the adaptation losses need.

The detector is a plain Faster R-CNN-style pipeline at desk scale: a small
strided convolutional backbone (stride 16), a single-scale anchor RPN on one
shared feature map, fixed-grid average ROI pooling, and a small fully
connected detection head. Every stage is exposed so training code can tap
image-level features and per-proposal object features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, InvalidInputError, NotInitializedError

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture and matching hyper-parameters for the detector scaffold."""

    categories: tuple[str, ...]
    channels: tuple[int, ...] = (8, 16, 32, 64)  # one stride-2 conv per entry
    anchor_scale: float = 32.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_pool_size: int = 7
    head_hidden: int = 256
    rpn_pre_nms_top: int = 128
    rpn_post_nms_top: int = 12
    rpn_nms_iou: float = 0.7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch_size: int = 64
    rpn_positive_fraction: float = 0.5
    roi_positive_iou: float = 0.5
    roi_append_gt: bool = True

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def object_feature_dim(self) -> int:
        return self.feature_channels * self.roi_pool_size * self.roi_pool_size

    @property
    def num_classes(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class BoxAnnotation:
    """One labeled object: category name plus a pixel-coordinate box."""

    category: str
    box: Box

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise InvalidInputError(f"degenerate box {self.box}: need x1 < x2 and y1 < y2")


@dataclass
class FeatureMap:
    """Backbone output: activations with shape (C, h, w) plus the input geometry."""

    activations: torch.Tensor
    stride: int
    image_height: int = 0
    image_width: int = 0

    def __post_init__(self) -> None:
        if self.image_height == 0:
            self.image_height = int(self.activations.shape[1]) * self.stride
        if self.image_width == 0:
            self.image_width = int(self.activations.shape[2]) * self.stride

    @property
    def channels(self) -> int:
        return int(self.activations.shape[0])

    @property
    def height(self) -> int:
        return int(self.activations.shape[1])

    @property
    def width(self) -> int:
        return int(self.activations.shape[2])


@dataclass(frozen=True)
class Proposal:
    """Candidate object region in input-image coordinates."""

    box: Box
    objectness: float


@dataclass
class ObjectFeatureSet:
    """Pooled per-proposal features, one row per proposal (M x D)."""

    features: torch.Tensor

    def __len__(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class Detection:
    category: str
    box: Box
    confidence: float


@dataclass
class RoiPredictions:
    """Detection-head outputs tied to the proposals and image they came from."""

    image_id: str
    boxes: torch.Tensor  # (M, 4) proposal boxes, input-image coordinates
    class_logits: torch.Tensor  # (M, K + 1), index 0 is background
    box_deltas: torch.Tensor  # (M, 4) class-agnostic regression


def validate_image(image: np.ndarray, stride: int) -> None:
    """Check ImageArray invariants: H x W x 3, values in [0, 1], size >= stride."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < stride or w < stride:
        raise InvalidInputError(f"image {h}x{w} smaller than backbone stride {stride}")
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise InvalidInputError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")


def clip_box(box: Box, width: float, height: float) -> Box:
    x1, y1, x2, y2 = box
    return (
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
        min(max(x2, 0.0), width),
        min(max(y2, 0.0), height),
    )


def boxes_iou_matrix(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) corner-format boxes."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in score order."""
    order = torch.argsort(scores, descending=True, stable=True).tolist()
    keep: list[int] = []
    while order:
        i = order.pop(0)
        keep.append(i)
        if not order:
            break
        rest = torch.tensor(order, dtype=torch.long)
        ious = boxes_iou_matrix(boxes[i].unsqueeze(0), boxes[rest])[0]
        order = [j for j, iou in zip(order, ious.tolist()) if iou <= iou_threshold]
    return keep


def encode_boxes(reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Standard (tx, ty, tw, th) parameterization of target boxes w.r.t. references."""
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw_ = target[:, 2] - target[:, 0]
    th_ = target[:, 3] - target[:, 1]
    tx_ = target[:, 0] + 0.5 * tw_
    ty_ = target[:, 1] + 0.5 * th_
    return torch.stack(
        [(tx_ - rx) / rw, (ty_ - ry) / rh, torch.log(tw_ / rw), torch.log(th_ / rh)], dim=1
    )


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_boxes; exp arguments clamped to avoid overflow."""
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    scale_clamp = math.log(1000.0 / 16)
    cx = deltas[:, 0] * rw + rx
    cy = deltas[:, 1] * rh + ry
    w = torch.exp(deltas[:, 2].clamp(max=scale_clamp)) * rw
    h = torch.exp(deltas[:, 3].clamp(max=scale_clamp)) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def pool_object_features(
    fmap: FeatureMap, proposals: Sequence[Proposal], pool_size: int = 7
) -> ObjectFeatureSet:
    """Fixed-grid average pooling of each proposal region into a flat row.

    The proposal box is mapped onto the feature grid (floor/ceil to whole
    cells), cropped, and average-pooled to pool_size x pool_size. Pure in
    (fmap, box); an empty proposal list yields an M=0 feature set.
    """
    acts = fmap.activations
    c, fh, fw = acts.shape
    dim = c * pool_size * pool_size
    if len(proposals) == 0:
        return ObjectFeatureSet(acts.new_zeros((0, dim)))
    rows = []
    for prop in proposals:
        x1, y1, x2, y2 = prop.box
        gx1 = min(max(int(math.floor(x1 / fmap.stride)), 0), fw - 1)
        gy1 = min(max(int(math.floor(y1 / fmap.stride)), 0), fh - 1)
        gx2 = min(max(int(math.ceil(x2 / fmap.stride)), gx1 + 1), fw)
        gy2 = min(max(int(math.ceil(y2 / fmap.stride)), gy1 + 1), fh)
        region = acts[:, gy1:gy2, gx1:gx2].unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(region, (pool_size, pool_size))
        rows.append(pooled.reshape(-1))
    return ObjectFeatureSet(torch.stack(rows, dim=0))


class Backbone(nn.Module):
    """Stack of stride-2 3x3 convolutions; overall stride 2**len(channels)."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in channels:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, kernel_size=1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, kernel_size=1)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = F.relu(self.conv(fmap))
        return self.objectness(t), self.deltas(t)


class DetectionHead(nn.Module):
    """ROI feature -> hidden FC -> (class logits, class-agnostic box deltas)."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4)

    def forward(self, rois: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = F.relu(self.fc(rois))
        return self.cls(t), self.reg(t)


class DetectionModel(nn.Module):
    """Backbone + RPN + detection head as one parameter container."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.backbone = Backbone(config.channels)
        self.rpn = RPNHead(config.feature_channels, len(config.anchor_ratios))
        self.head = DetectionHead(
            config.object_feature_dim, config.head_hidden, config.num_classes
        )


def generate_anchors(
    fh: int, fw: int, stride: int, scale: float, ratios: Sequence[float]
) -> torch.Tensor:
    """Single-scale anchors centered on every feature cell, (fh*fw*A, 4)."""
    ws = torch.tensor([scale / math.sqrt(r) for r in ratios])
    hs = torch.tensor([scale * math.sqrt(r) for r in ratios])
    base = torch.stack([-ws / 2, -hs / 2, ws / 2, hs / 2], dim=1)  # (A, 4)
    cy = (torch.arange(fh, dtype=torch.float32) + 0.5) * stride
    cx = (torch.arange(fw, dtype=torch.float32) + 0.5) * stride
    gy, gx = torch.meshgrid(cy, cx, indexing="ij")
    shifts = torch.stack([gx, gy, gx, gy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base.reshape(1, -1, 4)).reshape(-1, 4)


class Detector:
    """Public detector surface: feature taps, proposals, losses, inference."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.model = DetectionModel(config)

    # -- feature taps -------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def extract_features(self, image: np.ndarray) -> FeatureMap:
        """Run the backbone on one H x W x 3 image in [0, 1]."""
        validate_image(image, self.config.stride)
        x = torch.from_numpy(np.ascontiguousarray(image)).to(self.dtype)
        acts = self.backbone_features(x.permute(2, 0, 1).unsqueeze(0))
        return FeatureMap(acts[0], self.config.stride, image.shape[0], image.shape[1])

    def backbone_features(self, batch: torch.Tensor) -> torch.Tensor:
        return self.model.backbone(batch)

    # -- region proposals ---------------------------------------------------

    def rpn_outputs(self, fmap: FeatureMap) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """RPN head outputs plus the anchor grid for this map size.

        Returns (objectness_logits (N,), deltas (N, 4), anchors (N, 4)) with
        N = h * w * num_anchor_ratios, gradients attached.
        """
        obj, del_ = self.model.rpn(fmap.activations.unsqueeze(0))
        a = len(self.config.anchor_ratios)
        logits = obj[0].permute(1, 2, 0).reshape(-1)
        deltas = del_[0].reshape(a, 4, fmap.height, fmap.width).permute(2, 3, 0, 1).reshape(-1, 4)
        anchors = generate_anchors(
            fmap.height, fmap.width, fmap.stride,
            self.config.anchor_scale, self.config.anchor_ratios,
        ).to(logits.dtype)
        return logits, deltas, anchors

    def propose_regions(self, fmap: FeatureMap, max_proposals: int) -> list[Proposal]:
        """Top-scoring RPN boxes, clipped to image bounds, objectness descending."""
        if max_proposals < 1:
            raise ContractError(f"max_proposals must be >= 1, got {max_proposals}")
        with torch.no_grad():
            logits, deltas, anchors = self.rpn_outputs(fmap)
        return self._filter_proposals(logits, deltas, anchors, fmap, max_proposals)

    def _filter_proposals(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        anchors: torch.Tensor,
        fmap: FeatureMap,
        max_proposals: int,
    ) -> list[Proposal]:
        width = float(fmap.image_width)
        height = float(fmap.image_height)
        scores = torch.sigmoid(logits.detach())
        boxes = decode_boxes(anchors, deltas.detach())
        top = min(self.config.rpn_pre_nms_top, scores.numel())
        order = torch.argsort(scores, descending=True, stable=True)[:top]
        boxes, scores = boxes[order], scores[order]
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0.0, width)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0.0, height)
        valid = (
            torch.isfinite(boxes).all(dim=1)
            & torch.isfinite(scores)
            & (boxes[:, 2] - boxes[:, 0] >= 1.0)
            & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        )
        boxes, scores = boxes[valid], scores[valid]
        if boxes.shape[0] == 0:
            return []
        keep = nms(boxes, scores, self.config.rpn_nms_iou)[:max_proposals]
        return [
            Proposal(box=tuple(boxes[i].tolist()), objectness=float(scores[i])) for i in keep
        ]

    # -- object features ----------------------------------------------------

    def pool_object_features(
        self, fmap: FeatureMap, proposals: Sequence[Proposal]
    ) -> ObjectFeatureSet:
        return pool_object_features(fmap, proposals, self.config.roi_pool_size)

    # -- detection losses ---------------------------------------------------

    def head_predictions(
        self, image_id: str, fmap: FeatureMap, proposals: Sequence[Proposal]
    ) -> tuple[RoiPredictions, ObjectFeatureSet]:
        feats = self.pool_object_features(fmap, proposals)
        class_logits, box_deltas = self.model.head(feats.features)
        boxes = torch.tensor([p.box for p in proposals], dtype=self.dtype).reshape(-1, 4)
        return RoiPredictions(image_id, boxes, class_logits, box_deltas), feats

    def detection_losses(
        self,
        predictions: RoiPredictions,
        annotations: Sequence[BoxAnnotation],
        image_id: str,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """ROI-head classification and regression losses for one image.

        Proposals are matched to annotations at IoU >= roi_positive_iou;
        unmatched proposals are background. Regression (smooth L1) is summed
        over positives and normalized by the proposal count.
        """
        if predictions.image_id != image_id:
            raise ContractError(
                f"prediction image id {predictions.image_id!r} != annotation image id {image_id!r}"
            )
        logits = predictions.class_logits
        m = logits.shape[0]
        if m == 0:
            zero = logits.sum() * 0.0
            return zero, zero.clone()
        targets = torch.zeros(m, dtype=torch.long)
        reg_loss = logits.new_zeros(())
        if annotations:
            gt_boxes = torch.tensor([a.box for a in annotations], dtype=logits.dtype)
            gt_labels = torch.tensor(
                [self.config.categories.index(a.category) + 1 for a in annotations]
            )
            ious = boxes_iou_matrix(predictions.boxes, gt_boxes)
            best_iou, best_gt = ious.max(dim=1)
            positive = best_iou >= self.config.roi_positive_iou
            targets[positive] = gt_labels[best_gt[positive]]
            if positive.any():
                reg_targets = encode_boxes(
                    predictions.boxes[positive], gt_boxes[best_gt[positive]]
                )
                reg_loss = F.smooth_l1_loss(
                    predictions.box_deltas[positive], reg_targets, reduction="sum"
                ) / float(m)
        cls_loss = F.cross_entropy(logits, targets)
        return cls_loss, reg_loss

    def rpn_losses(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        anchors: torch.Tensor,
        annotations: Sequence[BoxAnnotation],
        rng: np.random.Generator,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness BCE and anchor-regression smooth L1 on a sampled minibatch."""
        cfg = self.config
        n = anchors.shape[0]
        if not annotations:
            # All anchors are background; sample a handful for the objectness loss.
            take = min(cfg.rpn_batch_size, n)
            idx = torch.from_numpy(rng.choice(n, size=take, replace=False))
            cls = F.binary_cross_entropy_with_logits(
                logits[idx], torch.zeros(take, dtype=logits.dtype)
            )
            return cls, logits.new_zeros(())
        gt = torch.tensor([a.box for a in annotations], dtype=logits.dtype)
        ious = boxes_iou_matrix(anchors, gt)
        best_iou, best_gt = ious.max(dim=1)
        labels = torch.full((n,), -1.0, dtype=logits.dtype)
        labels[best_iou < cfg.rpn_negative_iou] = 0.0
        labels[best_iou >= cfg.rpn_positive_iou] = 1.0
        # Guarantee a positive anchor for every annotation.
        per_gt_best = ious.argmax(dim=0)
        labels[per_gt_best] = 1.0
        best_gt[per_gt_best] = torch.arange(len(annotations))
        pos_idx = torch.nonzero(labels == 1.0).flatten()
        neg_idx = torch.nonzero(labels == 0.0).flatten()
        n_pos = min(len(pos_idx), int(cfg.rpn_batch_size * cfg.rpn_positive_fraction))
        n_neg = min(len(neg_idx), cfg.rpn_batch_size - n_pos)
        pos_idx = pos_idx[torch.from_numpy(rng.permutation(len(pos_idx))[:n_pos])]
        neg_idx = neg_idx[torch.from_numpy(rng.permutation(len(neg_idx))[:n_neg])]
        sampled = torch.cat([pos_idx, neg_idx])
        cls = F.binary_cross_entropy_with_logits(logits[sampled], labels[sampled])
        if len(pos_idx) == 0:
            return cls, logits.new_zeros(())
        reg_targets = encode_boxes(anchors[pos_idx], gt[best_gt[pos_idx]])
        reg = F.smooth_l1_loss(
            deltas[pos_idx], reg_targets, beta=1.0 / 9, reduction="sum"
        ) / float(len(sampled))
        return cls, reg

    # -- inference ----------------------------------------------------------

    def detect(
        self,
        image: np.ndarray,
        score_threshold: float = 0.5,
        nms_iou: float = 0.5,
        max_detections: int = 20,
    ) -> list[Detection]:
        """Detect objects with the plain two-stage pipeline (no adaptation parts)."""
        if self.model is None:
            raise NotInitializedError("detector has no weights loaded")
        with torch.no_grad():
            fmap = self.extract_features(image)
            proposals = self.propose_regions(fmap, self.config.rpn_post_nms_top)
            if not proposals:
                return []
            preds, _ = self.head_predictions("", fmap, proposals)
            probs = F.softmax(preds.class_logits, dim=1)
            boxes = decode_boxes(preds.boxes, preds.box_deltas)
        h, w = image.shape[:2]
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0.0, float(w))
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0.0, float(h))
        out: list[Detection] = []
        for k, category in enumerate(self.config.categories):
            scores = probs[:, k + 1]
            keep_mask = scores >= score_threshold
            if not keep_mask.any():
                continue
            cls_boxes = boxes[keep_mask]
            cls_scores = scores[keep_mask]
            for i in nms(cls_boxes, cls_scores, nms_iou):
                out.append(
                    Detection(
                        category=category,
                        box=tuple(cls_boxes[i].tolist()),
                        confidence=float(cls_scores[i]),
                    )
                )
        out.sort(key=lambda d: -d.confidence)
        return out[:max_detections]

    # -- weights ------------------------------------------------------------

    def state_dict(self) -> dict:
        return self.model.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state)

    def parameters(self):
        return self.model.parameters()
