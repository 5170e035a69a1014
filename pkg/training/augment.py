"""Online augmentation: flips, rotations, intensity scaling and elastic deformation.

Spatial transforms are applied identically to every modality and to the mask
(nearest neighbour for the mask). Classification labels are never touched.
"""

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from models import AugmentParams, Case, Modality


logger = logging.getLogger(__name__)

ROTATION_PLANES = ((0, 1), (0, 2), (1, 2))


def _map_spatial(case: Case, volume_fn: Callable[[np.ndarray], np.ndarray],
                 mask_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Case:
    mask_fn = mask_fn or volume_fn
    volumes = {
        modality: volume.model_copy(update={'data': np.ascontiguousarray(volume_fn(volume.data))})
        for modality, volume in case.volumes.items()
    }
    mask = None
    if case.mask is not None:
        mask = case.mask.model_copy(update={'labels': np.ascontiguousarray(mask_fn(case.mask.labels))})
    return case.model_copy(update={'volumes': volumes, 'mask': mask})


def flip_case(case: Case, axis: int) -> Case:
    return _map_spatial(case, lambda a: np.flip(a, axis=axis))


def rot90_case(case: Case, k: int, axes: Tuple[int, int]) -> Case:
    """Quarter-turn rotation; only valid in planes where both axes have equal length."""
    shape = case.shape
    if shape[axes[0]] != shape[axes[1]] and k % 2:
        raise ValueError(f"cannot quarter-turn plane {axes} of shape {shape}")
    return _map_spatial(case, lambda a: np.rot90(a, k=k, axes=axes))


def rotate_case(case: Case, angle: float, axes: Tuple[int, int]) -> Case:
    """Rotate by ``angle`` degrees in the plane ``axes``; volumes linear, mask nearest."""
    return _map_spatial(
        case,
        lambda a: ndimage.rotate(a, angle, axes=axes, reshape=False, order=1, mode='constant', cval=0.0),
        lambda m: ndimage.rotate(m, angle, axes=axes, reshape=False, order=0, mode='constant', cval=0),
    )


def scale_intensity(case: Case, factors: Dict[Modality, float]) -> Case:
    """Multiply each modality by its factor; the mask is left untouched."""
    volumes = {
        modality: volume.model_copy(update={'data': volume.data * factors.get(modality, 1.0)})
        for modality, volume in case.volumes.items()
    }
    return case.model_copy(update={'volumes': volumes})


def elastic_field(shape: Tuple[int, ...], rng: np.random.Generator, sigma: float,
                  magnitude: float) -> np.ndarray:
    """Smooth random displacement field of shape (3, *shape) bounded by ``magnitude`` voxels."""
    field = np.stack([ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), sigma) for _ in shape])
    peak = np.abs(field).max()
    if peak > 0:
        field *= magnitude / peak
    return field


def elastic_case(case: Case, displacement: np.ndarray) -> Case:
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in case.shape], indexing='ij')
    coords = [g + d for g, d in zip(grid, displacement)]
    return _map_spatial(
        case,
        lambda a: ndimage.map_coordinates(a, coords, order=1, mode='constant', cval=0.0),
        lambda m: ndimage.map_coordinates(m, coords, order=0, mode='constant', cval=0).astype(m.dtype),
    )


def augment(case: Case, seed: int, params: Optional[AugmentParams] = None) -> Case:
    """Randomly augment a case; deterministic for a given ``(case, seed, params)``."""
    params = params or AugmentParams()
    if not params.enabled:
        return case
    rng = np.random.default_rng(seed)

    for axis in range(3):
        if rng.random() < params.flip_prob:
            case = flip_case(case, axis)

    if rng.random() < params.rot90_prob:
        square = [p for p in ROTATION_PLANES if case.shape[p[0]] == case.shape[p[1]]]
        if square:
            plane = square[rng.integers(len(square))]
            case = rot90_case(case, int(rng.integers(1, 4)), plane)

    if rng.random() < params.rotation_prob and params.max_rotation_deg > 0:
        plane = ROTATION_PLANES[rng.integers(len(ROTATION_PLANES))]
        angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
        case = rotate_case(case, angle, plane)

    low, high = params.intensity_scale
    case = scale_intensity(case, {m: rng.uniform(low, high) for m in case.volumes})

    if rng.random() < params.elastic_prob and params.elastic_magnitude > 0:
        field = elastic_field(case.shape, rng, params.elastic_sigma, params.elastic_magnitude)
        case = elastic_case(case, field)

    return case
