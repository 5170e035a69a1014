"""Single-model inference helpers and probability-averaging ensembles."""

import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch

from errors import CheckpointError
from models import Case, MaskVolume, Task
from network.checkpoint import load_checkpoint, read_checkpoint_config
from network.fusion import ClassificationBundle
from network.model import MTSUNet
from training.data import batch_case


logger = logging.getLogger(__name__)


def _model_dtype(model: MTSUNet) -> torch.dtype:
    return next(model.parameters()).dtype


def _model_device(model: MTSUNet) -> torch.device:
    return next(model.parameters()).device


@torch.no_grad()
def predict_probabilities(model: MTSUNet, cases: Sequence[Case], task: Task) -> np.ndarray:
    """Per-case class probabilities, shape (N, 2)."""
    model.eval()
    rows = []
    for case in cases:
        image, t2, flair = batch_case(case, model.config.modalities, _model_device(model), _model_dtype(model))
        rows.append(model.predict_proba(image, t2, flair, task)[0].cpu().numpy())
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 2)


@torch.no_grad()
def ensemble_segmentation(models: Sequence[MTSUNet], case: Case) -> MaskVolume:
    """Argmax of the member-averaged softmax: {0, 1} for two-channel heads, {0, 1, 2, 3} for four."""
    total = None
    for model in models:
        model.eval()
        image, _, _ = batch_case(case, model.config.modalities, _model_device(model), _model_dtype(model))
        probs = torch.softmax(model.backbone.decode(model.backbone.encode(image)), dim=1).double().cpu()
        total = probs if total is None else total + probs
    labels = total.argmax(dim=1)[0].numpy().astype(np.int16)
    label_set = (0, 1) if models[0].config.backbone.seg_channels == 2 else (0, 1, 2, 3)
    return MaskVolume(labels=labels, spacing=case.spacing, label_set=label_set)


def predict_segmentation(model: MTSUNet, case: Case) -> MaskVolume:
    return ensemble_segmentation([model], case)


def average_probabilities(member_probs: Sequence[Sequence[float]]) -> np.ndarray:
    """Arithmetic mean of member probability vectors."""
    return np.mean(np.asarray(member_probs, dtype=np.float64), axis=0)


def load_ensemble(checkpoints: Sequence[Union[str, Path]]) -> List[MTSUNet]:
    """Load member models, requiring one shared config.

    Raises:
        CheckpointError: If no checkpoint is given or the configs differ.
    """
    if not checkpoints:
        raise CheckpointError("an ensemble needs at least one checkpoint")
    reference = read_checkpoint_config(checkpoints[0])
    for path in checkpoints[1:]:
        if read_checkpoint_config(path) != reference:
            raise CheckpointError(f"{path} was trained with a different config than {checkpoints[0]}")
    return [load_checkpoint(path, expected_config=reference) for path in checkpoints]


def ensemble_bundle(models: Sequence[MTSUNet], case: Case, task: Task) -> ClassificationBundle:
    """Average member softmax outputs for one case."""
    members = [predict_probabilities(model, [case], task)[0] for model in models]
    mean = average_probabilities(members)
    probabilities = torch.as_tensor(mean).unsqueeze(0)
    return ClassificationBundle(task=task, c_final=torch.log(probabilities), probabilities=probabilities,
                                source=models[0].source_for(task))


def ensemble_predict(checkpoints: Sequence[Union[str, Path]], case: Case, task: Task) -> ClassificationBundle:
    """Load the checkpoints and average their probabilities on ``case``.

    The final logits are the log of the mean probabilities, so their argmax is
    the argmax of the mean.
    """
    return ensemble_bundle(load_ensemble(checkpoints), case, task)
