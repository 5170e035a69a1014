"""Dual-Stream Fusion head, classification bundles and the joint loss."""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, ShapeError
from models import LossWeights, Source, Task
from network.backbone import seg_loss


logger = logging.getLogger(__name__)

IGNORE_LABEL = -1


def fuse_dsf(c_tafe: torch.Tensor, c_cmd: Optional[torch.Tensor]) -> torch.Tensor:
    """Concatenate the TAFE and CMD vectors, TAFE first."""
    if c_cmd is None:
        raise ConfigError("dual-stream fusion requires both the TAFE and the CMD stream")
    return torch.cat([c_tafe, c_cmd], dim=-1)


class MLPHead(nn.Module):
    """Linear -> ReLU -> Linear to two logits."""

    def __init__(self, in_features: int, hidden_width: int = 16, num_classes: int = 2):
        super().__init__()
        self.in_features = in_features
        self.hidden = nn.Linear(in_features, hidden_width)
        self.output = nn.Linear(hidden_width, num_classes)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-1] != self.in_features:
            raise ShapeError(f"MLP head expects {self.in_features} inputs, got {fused.shape[-1]}")
        return self.output(torch.relu(self.hidden(fused)))


class DSFModule(nn.Module):
    """Fuses the TAFE and CMD streams through :class:`MLPHead`."""

    def __init__(self, tafe_dim: int, cmd_dim: int, hidden_width: int = 16):
        super().__init__()
        self.head = MLPHead(tafe_dim + cmd_dim, hidden_width)

    def forward(self, c_tafe: torch.Tensor, c_cmd: Optional[torch.Tensor]) -> torch.Tensor:
        return self.head(fuse_dsf(c_tafe, c_cmd))


@dataclass
class ClassificationBundle:
    """Per-task logits with provenance."""
    task: Task
    c_final: torch.Tensor
    probabilities: torch.Tensor
    source: Source
    c_tafe: Optional[torch.Tensor] = None
    c_cmd: Optional[torch.Tensor] = None

    @classmethod
    def build(cls, task: Task, source: Source, c_final: torch.Tensor,
              c_tafe: Optional[torch.Tensor] = None, c_cmd: Optional[torch.Tensor] = None) -> "ClassificationBundle":
        return cls(task=task, c_final=c_final, probabilities=F.softmax(c_final, dim=-1),
                   source=source, c_tafe=c_tafe, c_cmd=c_cmd)

    @property
    def predicted(self) -> torch.Tensor:
        return self.probabilities.argmax(dim=-1)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy ignoring unknown labels (-1); zero when every label is unknown."""
    labels = labels.long()
    known = labels != IGNORE_LABEL
    if not bool(known.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[known], labels[known])


def combine_losses(seg: Optional[torch.Tensor], cls: Optional[torch.Tensor],
                   weights: LossWeights) -> torch.Tensor:
    """alpha * seg + beta * cls; a term with weight zero is skipped entirely."""
    if weights.alpha == 0 and weights.beta == 0:
        raise ConfigError("loss weights alpha and beta cannot both be zero")
    total = None
    if weights.alpha > 0 and seg is not None:
        total = weights.alpha * seg
    if weights.beta > 0 and cls is not None:
        term = weights.beta * cls
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("no loss term is active for the given weights and inputs")
    return total


def joint_loss(seg_logits: torch.Tensor, target: torch.Tensor, cls_logits: torch.Tensor,
               labels: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """L = alpha * seg_loss(S, G) + beta * cross_entropy(C, y)."""
    seg = seg_loss(seg_logits, target) if weights.alpha > 0 else None
    cls = classification_loss(cls_logits, labels) if weights.beta > 0 else None
    return combine_losses(seg, cls, weights)
