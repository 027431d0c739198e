"""Domain-level triplet regularization between source, target and auxiliary features.

Source features anchor the triplet, target features are the positive and
auxiliary features the negative: after adaptation the source-target distance
must stay at least a margin below the source-auxiliary distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .errors import ContractError, ModeError

logger = logging.getLogger(__name__)


@dataclass
class TripletFeatures:
    """(anchor=source, positive=target, negative=auxiliary) with a margin."""

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    margin: float = 1.0

    def __post_init__(self) -> None:
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ContractError(
                "triplet members must share a shape, got "
                f"{tuple(self.anchor.shape)}/{tuple(self.positive.shape)}/"
                f"{tuple(self.negative.shape)}"
            )
        if self.margin <= 0:
            raise ContractError(f"margin must be > 0, got {self.margin}")


def feature_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared element-wise difference; scale-free in the feature width."""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def image_triplet_loss(t: TripletFeatures) -> torch.Tensor:
    """Hinge on whole feature maps: max(d(S,T) - d(S,A) + margin, 0)."""
    gap = (
        feature_distance(t.anchor, t.positive)
        - feature_distance(t.anchor, t.negative)
        + t.margin
    )
    return torch.clamp(gap, min=0.0)


def object_triplet_loss(t: TripletFeatures, aligned_mode: bool = True) -> torch.Tensor:
    """Per-proposal hinge averaged over proposals; requires aligned pooling.

    All three members must be (M, D) matrices pooled with the same proposal
    boxes. Disabled in unaligned mode, where no object correspondence exists.
    """
    if not aligned_mode:
        raise ModeError("object-level triplet loss is disabled in unaligned mode")
    if t.anchor.dim() != 2:
        raise ContractError(f"expected (M, D) object features, got {tuple(t.anchor.shape)}")
    if t.anchor.shape[0] == 0:
        logger.debug("object triplet loss over zero proposals, returning 0 by convention")
        return torch.zeros(())
    d_pos = ((t.anchor - t.positive) ** 2).mean(dim=1)
    d_neg = ((t.anchor - t.negative) ** 2).mean(dim=1)
    return torch.clamp(d_pos - d_neg + t.margin, min=0.0).mean()
