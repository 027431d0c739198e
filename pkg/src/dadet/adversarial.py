"""Adversarial gradient reversal with hardness mining, plus the domain classifiers.

The reversal layer is an identity in the forward pass and multiplies the
upstream gradient by -lambda_adv in the backward pass. lambda_adv is not a
constant: easy-to-classify (hence poorly domain-invariant, i.e. hard for
transfer) samples get a larger reversed gradient, clipped at an overflow
threshold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NonFiniteGradientError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class AdversarialConfig:
    """lambda0 baseline, hardness threshold alpha, overflow threshold beta."""

    lambda0: float = 1.0
    alpha: float = 0.63
    beta: float = 30.0

    def __post_init__(self) -> None:
        if self.lambda0 <= 0:
            raise ContractError(f"lambda0 must be > 0, got {self.lambda0}")
        if self.alpha <= 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < self.lambda0:
            raise ContractError(f"beta ({self.beta}) must be >= lambda0 ({self.lambda0})")


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    AUXILIARY = "auxiliary"

    @property
    def classifier_target(self) -> float:
        """Ground truth for the domain classifiers: 1 source, 0 target."""
        if self is Domain.SOURCE:
            return 1.0
        if self is Domain.TARGET:
            return 0.0
        raise ContractError("auxiliary domain never enters a domain classifier")


@dataclass
class DomainPrediction:
    """Classifier probabilities: per-location (image level) or per-proposal."""

    probabilities: torch.Tensor

    @property
    def p_image(self) -> torch.Tensor:
        """Mean probability over all locations/proposals."""
        return self.probabilities.mean()


class LambdaHolder:
    """Mutable cell read by the reversal backward, set after the loss is known."""

    def __init__(self, value: float):
        self.value = float(value)


class _AdvGRLFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, holder: LambdaHolder) -> torch.Tensor:
        ctx.holder = holder
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        if not torch.isfinite(grad_output).all():
            raise NonFiniteGradientError("non-finite gradient reached the reversal layer")
        return -ctx.holder.value * grad_output, None


def advgrl(x: torch.Tensor, holder: LambdaHolder) -> torch.Tensor:
    """Attach the reversal layer: identity forward, -holder.value scaling backward."""
    return _AdvGRLFunction.apply(x, holder)


def advgrl_forward(v: torch.Tensor) -> torch.Tensor:
    """Forward rule: the input passes through unchanged."""
    return v.view_as(v)


def advgrl_backward(upstream_grad: torch.Tensor, lambda_adv: float) -> torch.Tensor:
    """Backward rule: -lambda_adv times the upstream gradient, element-wise."""
    if lambda_adv <= 0:
        raise ContractError(f"lambda_adv must be > 0, got {lambda_adv}")
    if not torch.isfinite(upstream_grad).all():
        raise NonFiniteGradientError("non-finite upstream gradient")
    return -lambda_adv * upstream_grad


def compute_lambda_adv(l_c: float, cfg: AdversarialConfig) -> float:
    """Hardness-adaptive reversal strength from the detached classifier loss.

    Below the hardness threshold the response grows as lambda0 / L_c, clipped
    at beta (L_c = 0 maps to beta, the limit of the clipped ratio); otherwise
    the baseline lambda0 applies.
    """
    if l_c < 0:
        raise ContractError(f"classifier loss must be >= 0, got {l_c}")
    if l_c < cfg.alpha:
        if l_c == 0.0:
            return cfg.beta
        return min(cfg.lambda0 / l_c, cfg.beta)
    return cfg.lambda0


class ImageDomainClassifier(nn.Module):
    """Two 1x1 convolutions emitting a per-location domain logit map."""

    def __init__(self, in_channels: int, hidden: int = 256):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=1)
        self.conv2 = nn.Conv2d(hidden, 1, kernel_size=1)

    def forward(self, fmap: torch.Tensor) -> DomainPrediction:
        """fmap (C, h, w) or (1, C, h, w) -> per-location probabilities (h, w)."""
        x = fmap.unsqueeze(0) if fmap.dim() == 3 else fmap
        logits = self.conv2(F.relu(self.conv1(x)))
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return DomainPrediction(probs.squeeze(1).squeeze(0))


class ObjectDomainClassifier(nn.Module):
    """Three fully connected layers emitting one domain probability per proposal."""

    def __init__(self, in_dim: int, hidden1: int = 1024, hidden2: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden1)
        self.fc2 = nn.Linear(hidden1, hidden2)
        self.fc3 = nn.Linear(hidden2, 1)

    def forward(self, rois: torch.Tensor) -> DomainPrediction:
        """rois (M, D) -> probabilities (M,); M = 0 yields an empty prediction."""
        if rois.shape[0] == 0:
            return DomainPrediction(rois.new_zeros((0,)))
        logits = self.fc3(F.relu(self.fc2(F.relu(self.fc1(rois)))))
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return DomainPrediction(probs.squeeze(1))


def _bce(probs: torch.Tensor, target: float) -> torch.Tensor:
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def image_domain_loss(
    predictions: list[DomainPrediction], labels: list[Domain]
) -> torch.Tensor:
    """Per-location BCE averaged within each image, then averaged over images."""
    if len(predictions) != len(labels):
        raise ContractError("one label per image prediction required")
    per_image = [
        _bce(pred.probabilities, label.classifier_target).mean()
        for pred, label in zip(predictions, labels)
    ]
    return torch.stack(per_image).mean()


def object_domain_loss(
    predictions: list[DomainPrediction], labels: list[Domain]
) -> torch.Tensor:
    """BCE averaged over every proposal in the batch; no proposals at all -> 0."""
    if len(predictions) != len(labels):
        raise ContractError("one label per image prediction required")
    losses = [
        _bce(pred.probabilities, label.classifier_target)
        for pred, label in zip(predictions, labels)
        if pred.probabilities.numel() > 0
    ]
    if not losses:
        return torch.zeros(())
    return torch.cat(losses).mean()
