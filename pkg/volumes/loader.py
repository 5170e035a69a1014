"""Load manifest entries into preprocessed cases."""

import logging
from itertools import combinations
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from errors import CaseError
from models import Case, ManifestEntry, MaskVolume, Volume3D
from utils.storage import CaseCache, read_nifti
from volumes.preprocessing import crop_or_pad, crop_or_pad_mask, znormalize


logger = logging.getLogger(__name__)

DEFAULT_TARGET = (96, 96, 96)


def load_case(entry: ManifestEntry, target: Sequence[int] = DEFAULT_TARGET,
              cache: Optional[CaseCache] = None) -> Case:
    """Load, shape-check and preprocess one case.

    Every modality is z-scored over its full grid and then center cropped or
    padded to ``target``; the mask gets the same crop/pad.

    Args:
        entry: Validated manifest entry.
        target: Output grid size.
        cache: Optional preprocessed-case cache.

    Returns:
        The preprocessed case.

    Raises:
        CaseError: If modalities (or the mask) disagree in shape or spacing,
            or the mask holds labels outside {0, 1, 2, 3}.
        OSError: If an image file cannot be read.
    """
    target = tuple(int(t) for t in target)
    if cache is not None:
        cached = cache.get(entry, target)
        if cached is not None:
            return cached

    raw = {modality: read_nifti(path) for modality, path in entry.paths.items()}
    if not raw:
        raise CaseError(f"case {entry.case_id} references no modality files")

    for modality, (data, _) in raw.items():
        if data.ndim != 3:
            raise CaseError(f"case {entry.case_id}: {modality.value} is not a 3D volume (shape {data.shape})")
    for (a, (data_a, _)), (b, (data_b, _)) in combinations(raw.items(), 2):
        if data_a.shape != data_b.shape:
            raise CaseError(f"case {entry.case_id}: {a.value} shape {data_a.shape} != {b.value} shape {data_b.shape}")
    spacings = {spacing for _, spacing in raw.values()}
    if len(spacings) > 1:
        raise CaseError(f"case {entry.case_id}: modalities differ in spacing {sorted(spacings)}")
    reference_shape = next(iter(raw.values()))[0].shape

    volumes = {}
    for modality, (data, spacing) in raw.items():
        volume = Volume3D(data=np.asarray(data, dtype=np.float64), spacing=spacing, modality=modality)
        normalized = crop_or_pad(znormalize(volume), target)
        volumes[modality] = normalized.model_copy(update={'data': normalized.data.astype(np.float32)})

    mask = None
    if entry.mask is not None:
        labels, mask_spacing = read_nifti(entry.mask)
        if labels.shape != reference_shape:
            raise CaseError(f"case {entry.case_id}: mask shape {labels.shape} != volume shape {reference_shape}")
        try:
            mask = crop_or_pad_mask(MaskVolume(labels=labels, spacing=next(iter(spacings))), target)
        except ValidationError as e:
            raise CaseError(f"case {entry.case_id}: invalid mask: {e.errors()[0]['msg']}") from e

    case = Case(
        case_id=entry.case_id,
        volumes=volumes,
        mask=mask,
        idh=entry.idh,
        codel_1p19q=entry.codel,
        grade=entry.grade,
        cohort=entry.split,
    )
    if cache is not None:
        cache.put(case, entry, target)
    logger.debug(f"Loaded case {entry.case_id} with {len(volumes)} modalities")
    return case


def load_cases(entries: List[ManifestEntry], target: Sequence[int] = DEFAULT_TARGET,
               cache: Optional[CaseCache] = None) -> List[Case]:
    """Load several entries in order."""
    return [load_case(entry, target=target, cache=cache) for entry in entries]
