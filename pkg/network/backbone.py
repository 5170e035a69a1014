"""Hierarchical 3D encoder and U-Net style decoder.

The encoder is a stack of four convolutional stages. Stage i halves the
spatial size and carries ``C * 2**(i-1)`` channels, so any module that
consumes the pyramid only depends on that shape contract.
"""

import logging
from typing import NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import LabelError, ShapeError
from models import BackboneConfig


logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class FeaturePyramid(NamedTuple):
    """Encoder stage outputs x1..x4."""
    x1: torch.Tensor
    x2: torch.Tensor
    x3: torch.Tensor
    x4: torch.Tensor

    def stage(self, index: int) -> torch.Tensor:
        if index not in (1, 2, 3, 4):
            raise ShapeError(f"no encoder stage {index}")
        return self[index - 1]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid(*(x.detach() for x in self))


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions with a residual projection."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm1 = nn.GroupNorm(1, out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(1, out_channels)
        self.skip = (nn.Conv3d(in_channels, out_channels, kernel_size=1)
                     if in_channels != out_channels else nn.Identity())
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.skip(x))


class EncoderStage(nn.Module):
    """Stride-2 downsampling followed by a residual block."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(1, out_channels),
            nn.GELU(),
        )
        self.block = ConvBlock(out_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(self.down(x))


class UpStage(nn.Module):
    """Transposed-conv upsampling, skip concatenation and a residual block."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.block = ConvBlock(out_channels + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor = None) -> torch.Tensor:
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.block(x)


class Backbone(nn.Module):
    """Encoder producing the feature pyramid and decoder producing segmentation logits."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        widths = [config.stage_channels(i) for i in range(1, 5)]
        self.channels = widths

        self.stages = nn.ModuleList([
            EncoderStage(config.in_channels, widths[0]),
            EncoderStage(widths[0], widths[1]),
            EncoderStage(widths[1], widths[2]),
            EncoderStage(widths[2], widths[3]),
        ])
        self.up4 = UpStage(widths[3], widths[2], widths[2])
        self.up3 = UpStage(widths[2], widths[1], widths[1])
        self.up2 = UpStage(widths[1], widths[0], widths[0])
        self.up1 = UpStage(widths[0], 0, widths[0])
        self.seg_head = nn.Conv3d(widths[0], config.seg_channels, kernel_size=1)

    def decoder_parameters(self):
        for module in (self.up4, self.up3, self.up2, self.up1, self.seg_head):
            yield from module.parameters()

    def encode(self, batch: torch.Tensor) -> FeaturePyramid:
        """Run the encoder.

        Args:
            batch: Tensor of shape (B, in_channels, D, H, W) with D, H, W divisible by 16.

        Raises:
            ShapeError: On wrong rank, channel count or spatial size.
        """
        if batch.ndim != 5:
            raise ShapeError(f"expected a (B, C, D, H, W) batch, got shape {tuple(batch.shape)}")
        if batch.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {batch.shape[1]}")
        spatial = tuple(batch.shape[2:])
        if any(s % 16 for s in spatial):
            raise ShapeError(f"spatial dims {spatial} must be divisible by 16")

        features = []
        x = batch
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return FeaturePyramid(*features)

    def decode(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Decode a pyramid into (B, seg_channels, D, H, W) logits.

        Raises:
            ShapeError: If the pyramid does not match this configuration.
        """
        for i, x in enumerate(pyramid, start=1):
            if x.ndim != 5 or x.shape[1] != self.channels[i - 1]:
                raise ShapeError(f"stage x{i} has shape {tuple(x.shape)}, expected {self.channels[i - 1]} channels")
        for i in range(1, 4):
            expected = tuple(s // 2 for s in pyramid[i - 1].shape[2:])
            if tuple(pyramid[i].shape[2:]) != expected:
                raise ShapeError(f"stage x{i + 1} spatial {tuple(pyramid[i].shape[2:])} != {expected}")

        x = self.up4(pyramid.x4, pyramid.x3)
        x = self.up3(x, pyramid.x2)
        x = self.up2(x, pyramid.x1)
        x = self.up1(x)
        return self.seg_head(x)

    def forward(self, batch: torch.Tensor) -> Tuple[FeaturePyramid, torch.Tensor]:
        pyramid = self.encode(batch)
        return pyramid, self.decode(pyramid)


def prepare_target(labels: torch.Tensor, seg_channels: int) -> torch.Tensor:
    """Map a {0, 1, 2, 3} label grid to class indices for the segmentation head.

    Two-channel heads see the whole tumour as class 1.

    Raises:
        LabelError: If any label lies outside {0, 1, 2, 3}.
    """
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() > 3):
        raise LabelError(f"mask labels must lie in {{0, 1, 2, 3}}, got range [{labels.min()}, {labels.max()}]")
    if seg_channels == 2:
        return (labels > 0).long()
    return labels


def seg_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss averaged over foreground classes.

    Sums run over the batch and all voxels for each class:
    ``1 - (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)``.

    Args:
        logits: (B, K, D, H, W) unnormalized scores.
        target: (B, D, H, W) or (B, 1, D, H, W) class indices in [0, K).

    Raises:
        LabelError: If the target holds an index outside [0, K).
        ShapeError: If spatial shapes disagree.
    """
    num_classes = logits.shape[1]
    if target.ndim == logits.ndim:
        target = target[:, 0]
    if tuple(target.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"target shape {tuple(target.shape)} incompatible with logits {tuple(logits.shape)}")
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= num_classes):
        raise LabelError(f"target labels must lie in [0, {num_classes}), got [{target.min()}, {target.max()}]")

    probs = F.softmax(logits, dim=1)
    one_hot = F.one_hot(target, num_classes).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    intersection = (probs * one_hot).sum(dims)
    denominator = probs.sum(dims) + one_hot.sum(dims)
    dice = (2.0 * intersection + smooth) / (denominator + smooth)
    return 1.0 - dice[1:].mean()


def tumor_probability(logits: torch.Tensor) -> torch.Tensor:
    """Binary tumour probability P = 1 - softmax background, shape (B, 1, D, H, W)."""
    background = F.softmax(logits, dim=1)[:, :1]
    return (1.0 - background).clamp(0.0, 1.0)
