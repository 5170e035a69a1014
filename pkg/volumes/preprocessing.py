"""Deterministic intensity standardisation and center crop/pad."""

import logging
from typing import Sequence, Tuple

import numpy as np

from errors import ConfigError, DomainError
from models import MaskVolume, Volume3D


logger = logging.getLogger(__name__)

STD_EPSILON = 1e-8


def znormalize(volume: Volume3D) -> Volume3D:
    """Standardise a volume to zero mean and unit variance over the full grid.

    Args:
        volume: Input volume, finite values only.

    Returns:
        New volume with the same shape, spacing and modality. A constant
        volume (std <= 1e-8) becomes all zeros and a warning is logged.

    Raises:
        DomainError: If the volume holds NaN or Inf.
    """
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{volume.modality.value} volume contains non-finite values")

    std = data.std()
    if std <= STD_EPSILON:
        logger.warning(f"Constant {volume.modality.value} volume (std={std:.3g}); returning zeros")
        normalized = np.zeros_like(data)
    else:
        normalized = (data - data.mean()) / std

    return volume.model_copy(update={'data': normalized})


def _check_target(target: Sequence[int]) -> Tuple[int, int, int]:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ConfigError(f"crop/pad target must be three positive ints, got {target}")
    return target


def crop_or_pad_array(array: np.ndarray, target: Sequence[int], fill: float = 0) -> np.ndarray:
    """Center-crop and/or pad a 3D array to exactly ``target``."""
    target = _check_target(target)
    slices = []
    pads = []
    for size, want in zip(array.shape, target):
        if size >= want:
            start = (size - want) // 2
            slices.append(slice(start, start + want))
            pads.append((0, 0))
        else:
            before = (want - size) // 2
            slices.append(slice(0, size))
            pads.append((before, want - size - before))

    cropped = array[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        cropped = np.pad(cropped, pads, mode='constant', constant_values=fill)
    return np.ascontiguousarray(cropped)


def crop_or_pad(volume: Volume3D, target: Sequence[int]) -> Volume3D:
    """Center crop/pad a volume; padding uses the post-z-score background value 0."""
    return volume.model_copy(update={'data': crop_or_pad_array(volume.data, target, fill=0.0)})


def crop_or_pad_mask(mask: MaskVolume, target: Sequence[int]) -> MaskVolume:
    """Apply the same geometry as :func:`crop_or_pad` to a label mask."""
    return mask.model_copy(update={'labels': crop_or_pad_array(mask.labels, target, fill=0)})
