"""Torch datasets built from preprocessed cases."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from errors import DataError
from models import CLASSIFICATION_TASKS, AugmentParams, Case, Modality, Task
from training.augment import augment


logger = logging.getLogger(__name__)


def case_tensors(case: Case, modalities: Sequence[Modality],
                 dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacked backbone input plus separate T2 and FLAIR volumes, all without batch axis.

    T2/FLAIR are zero volumes when the case lacks them or when they are not
    among ``modalities``, so a sequence left out of the subset never reaches
    the CMD stream either.

    Raises:
        DataError: If a selected backbone modality is missing.
    """
    missing = [m.value for m in modalities if m not in case.volumes]
    if missing:
        raise DataError(f"case {case.case_id} lacks modalities {missing}")
    image = np.stack([case.volumes[m].data for m in modalities]).astype(np.float64)
    zeros = np.zeros(case.shape, dtype=np.float64)
    selected = set(modalities) & set(case.volumes)
    t2 = case.volumes[Modality.T2].data if Modality.T2 in selected else zeros
    flair = case.volumes[Modality.FLAIR].data if Modality.FLAIR in selected else zeros
    return (torch.as_tensor(image, dtype=dtype),
            torch.as_tensor(np.asarray(t2)[None], dtype=dtype),
            torch.as_tensor(np.asarray(flair)[None], dtype=dtype))


def batch_case(case: Case, modalities: Sequence[Modality], device: str = "cpu",
               dtype: torch.dtype = torch.float32):
    """:func:`case_tensors` with a leading batch axis of one."""
    return tuple(t.unsqueeze(0).to(device) for t in case_tensors(case, modalities, dtype))


class CaseDataset(Dataset):
    """Samples of (image, t2, flair, target, has_mask, labels) for one task.

    ``labels`` holds one entry per classification task in the order
    idh, codel, grade, with -1 for unknown. Augmentation seeds derive from
    ``(seed, epoch, index)`` so every epoch sees fresh, reproducible draws.
    """

    def __init__(self, cases: List[Case], modalities: Sequence[Modality],
                 augment_params: Optional[AugmentParams] = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.cases = cases
        self.modalities = tuple(modalities)
        self.augment_params = augment_params
        self.seed = seed
        self.dtype = dtype
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.cases)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        case = self.cases[index]
        if self.augment_params is not None and self.augment_params.enabled:
            sample_seed = int(np.random.SeedSequence([self.seed, self.epoch, index]).generate_state(1)[0])
            case = augment(case, sample_seed, self.augment_params)

        image, t2, flair = case_tensors(case, self.modalities, self.dtype)
        if case.mask is not None:
            target = torch.as_tensor(case.mask.labels.astype(np.int64))
        else:
            target = torch.zeros(case.shape, dtype=torch.long)
        return {
            'image': image,
            't2': t2,
            'flair': flair,
            'target': target,
            'has_mask': torch.tensor(case.mask is not None),
            'labels': torch.tensor([case.label_for(t) for t in CLASSIFICATION_TASKS], dtype=torch.long),
        }


def task_label_index(task: Task) -> int:
    """Column of ``task`` in the dataset's ``labels`` tensor."""
    return CLASSIFICATION_TASKS.index(task)
