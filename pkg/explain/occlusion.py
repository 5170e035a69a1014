"""Occlusion-sensitivity maps for trained classifiers."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from errors import ConfigError
from models import Case, Heatmap, Task
from network.model import MTSUNet
from training.data import batch_case


logger = logging.getLogger(__name__)


def window_starts(size: int, patch: int, stride: int) -> List[int]:
    """Start offsets along one axis; the last window is clamped to end at ``size``."""
    if patch > size:
        raise ConfigError(f"occlusion patch {patch} exceeds volume extent {size}")
    if patch <= 0 or stride <= 0:
        raise ConfigError(f"occlusion patch and stride must be positive, got {patch}, {stride}")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def _nearest_window(size: int, starts: Sequence[int], patch: int) -> np.ndarray:
    centers = np.asarray(starts, dtype=np.float64) + patch / 2.0
    voxels = np.arange(size, dtype=np.float64) + 0.5
    return np.abs(voxels[:, None] - centers[None, :]).argmin(axis=1)


def _occlude(tensor: torch.Tensor, corner: Tuple[int, int, int], patch: Sequence[int], fill: float) -> torch.Tensor:
    occluded = tensor.clone()
    d, h, w = corner
    occluded[..., d:d + patch[0], h:h + patch[1], w:w + patch[2]] = fill
    return occluded


@torch.no_grad()
def occlusion_map(model: MTSUNet, case: Case, patch: Sequence[int] = (16, 16, 16),
                  stride: Sequence[int] = (8, 8, 8), fill: float = 0.0, task: Task = Task.IDH,
                  target_class: Optional[int] = None) -> Heatmap:
    """Drop in target-class probability when a patch of every input volume is replaced by ``fill``.

    Windows follow the stride grid (plus a final window flush with each far
    edge), and the grid of probability drops is nearest-neighbour upsampled to
    the voxel grid.

    Args:
        model: Trained network; switched to eval mode.
        case: Preprocessed case.
        patch: Window size per axis, in voxels.
        stride: Step between windows per axis.
        fill: Replacement intensity.
        task: Classification head to explain.
        target_class: Class whose probability is tracked; defaults to the predicted class.

    Raises:
        ConfigError: If the patch exceeds the volume.
    """
    model.eval()
    parameter = next(model.parameters())
    image, t2, flair = batch_case(case, model.config.modalities, parameter.device, parameter.dtype)
    shape = case.shape
    starts = [window_starts(shape[a], patch[a], stride[a]) for a in range(3)]

    baseline = model.predict_proba(image, t2, flair, task)[0]
    if target_class is None:
        target_class = int(baseline.argmax())
    reference = float(baseline[target_class])

    grid = np.zeros([len(s) for s in starts], dtype=np.float64)
    for i, d in enumerate(starts[0]):
        for j, h in enumerate(starts[1]):
            for k, w in enumerate(starts[2]):
                corner = (d, h, w)
                probs = model.predict_proba(_occlude(image, corner, patch, fill), _occlude(t2, corner, patch, fill),
                                            _occlude(flair, corner, patch, fill), task)
                grid[i, j, k] = reference - float(probs[0, target_class])
    logger.debug(f"Occlusion on {case.case_id}: {grid.size} windows, max drop {grid.max():.4f}")

    index = [_nearest_window(shape[a], starts[a], patch[a]) for a in range(3)]
    values = grid[np.ix_(*index)]
    return Heatmap(values=values, target_class=target_class, method="occlusion", task=task)
