"""Tumor-Aware Feature Encoding: multi-scale pooling of encoder stages and per-task heads."""

import logging
from typing import Iterable, Sequence, Union

import torch
import torch.nn as nn

from errors import ConfigError, ShapeError
from models import BackboneConfig, StageSet, Task
from network.backbone import FeaturePyramid


logger = logging.getLogger(__name__)


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pooling over all spatial axes: (B, C, ...) -> (B, C)."""
    if x.ndim < 3:
        raise ShapeError(f"gap expects (B, C, *spatial), got shape {tuple(x.shape)}")
    return x.mean(dim=tuple(range(2, x.ndim)))


def _stage_indices(stages: Union[StageSet, Sequence[int]]) -> Sequence[int]:
    indices = stages.stages if isinstance(stages, StageSet) else tuple(stages)
    if not indices:
        raise ConfigError("TAFE stage set must not be empty")
    return sorted(indices)


def fuse_stages(pyramid: FeaturePyramid, stages: Union[StageSet, Sequence[int]]) -> torch.Tensor:
    """Concatenate pooled stage features in ascending stage order."""
    return torch.cat([gap(pyramid.stage(i)) for i in _stage_indices(stages)], dim=1)


class TAFEHead(nn.Module):
    """Dropout followed by a single linear layer to two logits."""

    def __init__(self, in_features: int, num_classes: int = 2, dropout: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(in_features, num_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_features:
            raise ShapeError(f"TAFE head expects {self.in_features} features, got {z.shape[-1]}")
        return self.linear(self.dropout(z))


class TAFEModule(nn.Module):
    """Shared fused vector with one head per classification task."""

    def __init__(self, backbone: BackboneConfig, stages: StageSet, tasks: Iterable[Task]):
        super().__init__()
        self.stages = tuple(_stage_indices(stages))
        self.fused_dim = sum(backbone.stage_channels(i) for i in self.stages)
        self.heads = nn.ModuleDict({
            task.value: TAFEHead(self.fused_dim, dropout=backbone.dropout_rate) for task in tasks
        })

    def fuse(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return fuse_stages(pyramid, self.stages)

    def classify(self, z: torch.Tensor, task: Task) -> torch.Tensor:
        if task.value not in self.heads:
            raise ConfigError(f"no TAFE head for task {task.value}")
        return self.heads[task.value](z)
