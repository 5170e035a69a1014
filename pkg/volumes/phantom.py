"""Synthetic spherical-lesion phantoms with a controllable T2-FLAIR mismatch sign.

A phantom is a uniform background with a spherical tumour core surrounded by
a peritumoral rim. Mismatch phantoms have a T2-bright core whose FLAIR signal
is suppressed and a bright FLAIR rim. Non-mismatch phantoms keep the core
bright on FLAIR and carry an enhancing T1C shell around a necrotic centre.
"""

import logging
from typing import List, Optional

import numpy as np

from errors import PhantomSpecError
from models import Case, MaskVolume, Modality, PhantomSpec, Volume3D


logger = logging.getLogger(__name__)

BACKGROUND = 1.0
ENHANCING_SHELL = 1.5  # voxels

# Lesion contrasts above background, in units of max(1, 2 * noise_sigma).
CONTRASTS = {
    True: {
        Modality.T1: {'core': -0.4, 'rim': -0.1},
        Modality.T1C: {'core': -0.4, 'rim': -0.1, 'shell': -0.4},
        Modality.T2: {'core': 2.0, 'rim': 1.0},
        Modality.FLAIR: {'core': 0.2, 'rim': 2.0},
    },
    False: {
        Modality.T1: {'core': -0.4, 'rim': -0.1},
        Modality.T1C: {'core': -0.2, 'rim': 0.0, 'shell': 2.0},
        Modality.T2: {'core': 2.0, 'rim': 1.0},
        Modality.FLAIR: {'core': 2.0, 'rim': 1.5},
    },
}


def contrast_unit(spec: PhantomSpec) -> float:
    """Intensity unit that keeps lesion contrast above the noise floor."""
    return max(1.0, 2.0 * spec.noise_sigma)


def lesion_regions(spec: PhantomSpec, center: np.ndarray):
    """Boolean core, enhancing-shell and rim regions around ``center``."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.grid_size], indexing='ij')
    radius = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    core = radius <= spec.core_radius
    rim = (radius > spec.core_radius) & (radius <= spec.core_radius + spec.rim_thickness)
    shell = core & (radius > spec.core_radius - ENHANCING_SHELL)
    return core, shell, rim


def generate_phantom(spec: PhantomSpec, seed: int, case_id: Optional[str] = None) -> Case:
    """Generate one phantom case.

    The output is a pure function of ``(spec, seed)``.

    Args:
        spec: Phantom parameters.
        seed: Integer seed for lesion placement, contrast jitter and noise.
        case_id: Identifier; defaults to ``phantom_<seed>``.

    Returns:
        Case with T1, T1C, T2 and FLAIR volumes, a 4-label mask and labels set
        by ``spec.label_rule``.

    Raises:
        PhantomSpecError: If the spec violates its invariants.
    """
    problems = spec.violations()
    if problems:
        raise PhantomSpecError('; '.join(problems))

    rng = np.random.default_rng(seed)
    shape = spec.grid_size
    offset = rng.integers(-spec.center_jitter, spec.center_jitter + 1, size=3)
    center = (np.asarray(shape) - 1) / 2.0 + offset
    core, shell, rim = lesion_regions(spec, center)

    unit = contrast_unit(spec)
    contrasts = CONTRASTS[spec.mismatch]
    volumes = {}
    for modality in (Modality.T1, Modality.T1C, Modality.T2, Modality.FLAIR):
        jitter = 1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
        data = np.full(shape, BACKGROUND, dtype=np.float64)
        data[core] += contrasts[modality]['core'] * unit * jitter
        data[rim] += contrasts[modality]['rim'] * unit * jitter
        if 'shell' in contrasts[modality]:
            data[shell] = BACKGROUND + contrasts[modality]['shell'] * unit * jitter
        if spec.noise_sigma > 0:
            data += rng.normal(0.0, spec.noise_sigma, size=shape)
        volumes[modality] = Volume3D(data=data.astype(np.float32), spacing=spec.spacing, modality=modality)

    labels = np.zeros(shape, dtype=np.int16)
    labels[rim] = 2
    labels[core] = 1
    if not spec.mismatch:
        labels[shell] = 3

    rule = spec.label_rule
    return Case(
        case_id=case_id or f"phantom_{seed}",
        volumes=volumes,
        mask=MaskVolume(labels=labels, spacing=spec.spacing),
        idh=rule.mismatch_idh if spec.mismatch else rule.other_idh,
        codel_1p19q=rule.mismatch_codel if spec.mismatch else rule.other_codel,
        grade=rule.mismatch_grade if spec.mismatch else rule.other_grade,
        cohort='phantom',
    )


def generate_cohort(n: int, spec: PhantomSpec, seed: int, mismatch_fraction: float = 0.5,
                    prefix: str = "phantom") -> List[Case]:
    """Generate ``n`` phantoms, ``round(n * mismatch_fraction)`` of them with the mismatch sign.

    Per-case seeds are spawned from ``seed`` so the cohort is reproducible and
    each case can be regenerated on its own.
    """
    if n < 0:
        raise PhantomSpecError(f"cohort size must be >= 0, got {n}")
    if not 0.0 <= mismatch_fraction <= 1.0:
        raise PhantomSpecError(f"mismatch_fraction must lie in [0, 1], got {mismatch_fraction}")

    sequence = np.random.SeedSequence(seed)
    rng = np.random.default_rng(sequence)
    n_mismatch = int(round(n * mismatch_fraction))
    flags = rng.permutation(np.arange(n) < n_mismatch)
    children = sequence.spawn(n)

    cases = []
    for i, (flag, child) in enumerate(zip(flags, children)):
        case_seed = int(child.generate_state(1)[0])
        case_spec = spec.model_copy(update={'mismatch': bool(flag)})
        cases.append(generate_phantom(case_spec, case_seed, case_id=f"{prefix}_{i:04d}"))

    logger.info(f"Generated {n} phantoms ({n_mismatch} with mismatch sign) from seed {seed}")
    return cases
