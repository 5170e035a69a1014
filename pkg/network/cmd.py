"""Cross-Modality Differential stream.

T2 and FLAIR are gated by the tumour probability, embedded by separate
stride-2 stems, differenced with amplification, and re-weighted by a spatial
mismatch attention map before pooling into a two-logit classifier.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn

from errors import ConfigError, DomainError, ShapeError
from models import CMDConfig
from network.tafe import gap


logger = logging.getLogger(__name__)


def gate_value(probability: torch.Tensor, min_gate: float) -> torch.Tensor:
    """G(P) = min_gate + (1 - min_gate) * P, exact at both endpoints."""
    gate = probability + min_gate * (1.0 - probability)
    return gate.clamp(min_gate, 1.0)


def gate_inputs(t2: torch.Tensor, flair: torch.Tensor, probability: torch.Tensor,
                min_gate: float = 0.1) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scale T2 and FLAIR voxelwise by G(P).

    Raises:
        DomainError: If P leaves [0, 1].
        ShapeError: If the volumes and P do not line up.
    """
    if not 0.0 < min_gate <= 1.0:
        raise ConfigError(f"min_gate must lie in (0, 1], got {min_gate}")
    if t2.shape != flair.shape:
        raise ShapeError(f"T2 shape {tuple(t2.shape)} != FLAIR shape {tuple(flair.shape)}")
    if probability.shape[0] != t2.shape[0] or probability.shape[2:] != t2.shape[2:]:
        raise ShapeError(f"tumour probability shape {tuple(probability.shape)} does not match {tuple(t2.shape)}")
    if probability.numel() and (probability.min() < 0 or probability.max() > 1):
        raise DomainError("tumour probability must lie in [0, 1]")

    gate = gate_value(probability, min_gate)
    return t2 * gate, flair * gate


def amplify_difference(f_t2: torch.Tensor, f_flair: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """F_diff = gamma * (F_T2 - F_FLAIR)."""
    if gamma <= 1.0:
        raise ConfigError(f"amplification factor gamma must exceed 1, got {gamma}")
    if f_t2.shape != f_flair.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_t2.shape)} vs {tuple(f_flair.shape)}")
    return gamma * (f_t2 - f_flair)


def augment_features(f_t2: torch.Tensor, f_flair: torch.Tensor,
                     attention: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """F' = F + A * F for both branches, A broadcast over channels."""
    if f_t2.shape != f_flair.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_t2.shape)} vs {tuple(f_flair.shape)}")
    if (attention.ndim != f_t2.ndim or attention.shape[1] != 1
            or attention.shape[0] != f_t2.shape[0] or attention.shape[2:] != f_t2.shape[2:]):
        raise ShapeError(f"attention shape {tuple(attention.shape)} cannot weight features {tuple(f_t2.shape)}")
    return f_t2 + attention * f_t2, f_flair + attention * f_flair


class MismatchAttention(nn.Module):
    """sigmoid(ReLU(conv3([max_c F_diff, mean_c F_diff])))."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size=3, padding=1)

    def forward(self, f_diff: torch.Tensor) -> torch.Tensor:
        f_max = f_diff.max(dim=1, keepdim=True).values
        f_avg = f_diff.mean(dim=1, keepdim=True)
        return torch.sigmoid(torch.relu(self.conv(torch.cat([f_max, f_avg], dim=1))))


class CMDClassifier(nn.Module):
    def __init__(self, channels: int, dropout: float = 0.5, num_classes: int = 2):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(2 * channels, num_classes)

    def pool(self, f_t2: torch.Tensor, f_flair: torch.Tensor) -> torch.Tensor:
        if f_t2.shape != f_flair.shape:
            raise ShapeError(f"feature shapes differ: {tuple(f_t2.shape)} vs {tuple(f_flair.shape)}")
        return torch.cat([gap(f_t2), gap(f_flair)], dim=1)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(self.dropout(pooled))


@dataclass
class CMDOutput:
    """Intermediate tensors of one CMD pass, kept for attribution."""
    f_t2: torch.Tensor
    f_flair: torch.Tensor
    f_diff: torch.Tensor
    attention: torch.Tensor
    f_t2_aug: torch.Tensor
    f_flair_aug: torch.Tensor
    features: torch.Tensor
    logits: torch.Tensor


class CMDModule(nn.Module):
    """Full CMD pipeline from raw T2/FLAIR and tumour probability to logits."""

    def __init__(self, config: CMDConfig, dropout: float = 0.5):
        super().__init__()
        self.config = config
        self.stem_t2 = nn.Conv3d(1, config.channels, kernel_size=3, stride=2, padding=1)
        self.stem_flair = nn.Conv3d(1, config.channels, kernel_size=3, stride=2, padding=1)
        self.attention = MismatchAttention()
        self.classifier = CMDClassifier(config.channels, dropout=dropout)

    def extract_modality_features(self, t2: torch.Tensor,
                                  flair: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if t2.shape != flair.shape:
            raise ShapeError(f"T2 shape {tuple(t2.shape)} != FLAIR shape {tuple(flair.shape)}")
        if t2.ndim != 5 or t2.shape[1] != 1:
            raise ShapeError(f"CMD stems expect (B, 1, D, H, W) inputs, got {tuple(t2.shape)}")
        return self.stem_t2(t2), self.stem_flair(flair)

    def forward(self, t2: torch.Tensor, flair: torch.Tensor, probability: torch.Tensor) -> CMDOutput:
        t2_gated, flair_gated = gate_inputs(t2, flair, probability, self.config.min_gate)
        f_t2, f_flair = self.extract_modality_features(t2_gated, flair_gated)
        f_diff = amplify_difference(f_t2, f_flair, self.config.gamma)
        attention = self.attention(f_diff)
        f_t2_aug, f_flair_aug = augment_features(f_t2, f_flair, attention)
        features = self.classifier.pool(f_t2_aug, f_flair_aug)
        return CMDOutput(
            f_t2=f_t2,
            f_flair=f_flair,
            f_diff=f_diff,
            attention=attention,
            f_t2_aug=f_t2_aug,
            f_flair_aug=f_flair_aug,
            features=features,
            logits=self.classifier(features),
        )
