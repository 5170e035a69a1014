"""Grad-CAM on encoder stages and the CMD feature streams."""

import logging
from typing import Optional

import torch
import torch.nn.functional as F

from errors import ConfigError
from models import Case, Heatmap, Task
from network.model import MTSUNet, ModelOutput
from training.data import batch_case


logger = logging.getLogger(__name__)

PYRAMID_LAYERS = ("x1", "x2", "x3", "x4")
CMD_LAYERS = {"cmd_t2": "f_t2_aug", "cmd_flair": "f_flair_aug"}
GRADCAM_LAYERS = PYRAMID_LAYERS + tuple(CMD_LAYERS)


def _activation(output: ModelOutput, layer: str) -> torch.Tensor:
    if layer in PYRAMID_LAYERS:
        return getattr(output.pyramid, layer)
    if layer in CMD_LAYERS:
        if output.cmd is None:
            raise ConfigError(f"layer {layer} needs a model with the CMD stream")
        return getattr(output.cmd, CMD_LAYERS[layer])
    raise ConfigError(f"unknown Grad-CAM layer {layer!r}; expected one of {', '.join(GRADCAM_LAYERS)}")


def gradcam(model: MTSUNet, case: Case, layer: str = "x4", target_class: Optional[int] = None,
            task: Task = Task.IDH) -> Heatmap:
    """Class activation map from the gradient-weighted activations of ``layer``.

    Channel weights are the spatial means of the score gradient. The weighted
    sum is rectified, trilinearly resized to the input grid and divided by its
    maximum when that is positive. A score that does not depend on the layer
    yields an all-zero map.

    Raises:
        ConfigError: For an unknown layer or a CMD layer on a model without CMD.
    """
    model.eval()
    parameter = next(model.parameters())
    image, t2, flair = batch_case(case, model.config.modalities, parameter.device, parameter.dtype)

    with torch.enable_grad():
        output = model(image, t2, flair)
        if task not in output.bundles:
            raise ConfigError(f"model has no {task.value} head")
        activation = _activation(output, layer)
        logits = output.bundles[task].c_final
        if target_class is None:
            target_class = int(logits[0].argmax())
        score = logits[0, target_class]
        gradient = None
        if activation.requires_grad and score.requires_grad:
            gradient, = torch.autograd.grad(score, activation, allow_unused=True)

    shape = case.shape
    if gradient is None or not bool(gradient.abs().sum() > 0):
        logger.info(f"Grad-CAM on {case.case_id}: zero gradient at {layer}, returning an empty map")
        values = torch.zeros(shape, dtype=torch.float64)
    else:
        weights = gradient.mean(dim=(2, 3, 4), keepdim=True)
        cam = F.relu((weights * activation.detach()).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=shape, mode='trilinear', align_corners=False)[0, 0].double()
        cam = cam.clamp(min=0)
        peak = float(cam.max())
        values = cam / peak if peak > 0 else cam

    return Heatmap(values=values.cpu().numpy(), target_class=target_class, method="gradcam", layer=layer, task=task)
