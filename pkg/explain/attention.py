"""CMD mismatch-attention maps on the input grid."""

import logging

import numpy as np
import torch
import torch.nn.functional as F

from errors import ConfigError
from models import Case, Heatmap, Task
from network.model import MTSUNet
from training.data import batch_case


logger = logging.getLogger(__name__)


def attention_map(model: MTSUNet, case: Case, task: Task = Task.IDH) -> Heatmap:
    """Voxel attention of the CMD stream, nearest-neighbour resized to the case grid.

    The map is the sigmoid attention the CMD module multiplies into its T2 and
    FLAIR features, so every value lies in [0.5, 1). ``target_class`` is the
    predicted class for ``task``.

    Raises:
        ConfigError: If the model has no CMD stream or no head for ``task``.
    """
    if model.cmd is None:
        raise ConfigError("attention maps need a model with the CMD stream")
    model.eval()
    parameter = next(model.parameters())
    image, t2, flair = batch_case(case, model.config.modalities, parameter.device, parameter.dtype)
    with torch.no_grad():
        output = model(image, t2, flair)
    if task not in output.bundles:
        raise ConfigError(f"model has no {task.value} head")

    attention = F.interpolate(output.cmd.attention, size=case.shape, mode='nearest')[0, 0]
    predicted = int(output.bundles[task].c_final[0].argmax())
    return Heatmap(values=attention.double().cpu().numpy(), target_class=predicted, method="attention",
                   layer="cmd", task=task)


def attention_contrast(heatmap: Heatmap, case: Case) -> float:
    """Mean attention inside the tumour core minus the mean over background voxels.

    Raises:
        ConfigError: If the case has no mask, or the mask has no core or no background.
    """
    if case.mask is None:
        raise ConfigError(f"case {case.case_id} has no mask to score attention against")
    labels = case.mask.labels
    core, background = labels == 1, labels == 0
    if not core.any() or not background.any():
        raise ConfigError(f"case {case.case_id} needs both core and background voxels")
    return float(np.mean(heatmap.values[core]) - np.mean(heatmap.values[background]))
