"""Shared fixtures: tiny phantoms, tiny network configs, on-disk phantom manifests and finite differences."""

import sys
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from models import BackboneConfig, ClassifierMode, ModelConfig, PhantomSpec, Task
from utils.storage import ArtifactStorage
from volumes.phantom import generate_cohort


TINY_SPEC = PhantomSpec(grid_size=(16, 16, 16), core_radius=3.0, rim_thickness=1.5, center_jitter=1)


def tiny_model_config(task: Task = Task.IDH, mode: ClassifierMode = ClassifierMode.DSF, channels: int = 2,
                      size: int = 16, **backbone) -> ModelConfig:
    """Smallest network that satisfies the shape contract."""
    return ModelConfig(
        task=task,
        mode=mode,
        backbone=BackboneConfig(base_channels=channels, input_size=(size, size, size), **backbone),
        cmd={'channels': 2},
        dsf={'hidden_width': 4},
    )


def write_phantom_manifest(root: Path, n: int = 6, seed: int = 0, split: str = "train") -> Path:
    """Generate ``n`` tiny phantoms as NIfTI files plus ``manifest.csv`` under ``root``."""
    storage = ArtifactStorage(root)
    rows = []
    for case in generate_cohort(n, TINY_SPEC, seed=seed):
        row = storage.save_case(case, root)
        row['split'] = split
        rows.append(row)
    return storage.write_manifest(rows, root / "manifest.csv")


def sample_biases(module: torch.nn.Module, prefixes: Sequence[str]) -> Dict[str, torch.nn.Parameter]:
    """First bias parameter under each name prefix."""
    named = dict(module.named_parameters())
    picked = {}
    for prefix in prefixes:
        name = next(n for n in named if n.startswith(prefix) and n.endswith("bias"))
        picked[name] = named[name]
    return picked


def finite_difference_grads(loss_fn: Callable[[], torch.Tensor], parameters: Sequence[torch.Tensor],
                            eps: float = 1e-6) -> List[torch.Tensor]:
    """Central differences of ``loss_fn()`` for every entry of each parameter."""
    grads = []
    with torch.no_grad():
        for param in parameters:
            grad = torch.zeros_like(param)
            flat, flat_grad = param.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = loss_fn().item()
                flat[i] = original - eps
                minus = loss_fn().item()
                flat[i] = original
                flat_grad[i] = (plus - minus) / (2 * eps)
            grads.append(grad)
    return grads


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def phantom_manifest(tmp_path):
    return write_phantom_manifest(tmp_path / "phantoms")
