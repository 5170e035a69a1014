"""Checkpoint archives holding weights, the model configuration and a format version."""

import logging
from pathlib import Path
from typing import Optional, Union

import torch
from pydantic import ValidationError

from errors import CheckpointError
from models import ModelConfig
from network.model import MTSUNet


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_checkpoint(model: MTSUNet, path: Union[str, Path]) -> Path:
    """Save weights and the embedded :class:`ModelConfig`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        'format_version': FORMAT_VERSION,
        'config': model.config.model_dump(mode='json'),
        'state_dict': model.state_dict(),
    }, path)
    logger.debug(f"Saved checkpoint to {path}")
    return path


def read_checkpoint_config(path: Union[str, Path]) -> ModelConfig:
    """Configuration embedded in a checkpoint, without building the model."""
    return _read(Path(path))[0]


def _read(path: Path):
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or 'config' not in payload or 'state_dict' not in payload:
        raise CheckpointError(
            f"{path} has no embedded model config; it was not written by save_checkpoint. "
            f"Rebuild the model with its ModelConfig, load the weights and re-save it.")
    version = payload.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.model_validate(payload['config'])
    except ValidationError as e:
        raise CheckpointError(f"{path} holds an invalid model config: {e}") from e
    return config, payload['state_dict']


def _config_diff(a: ModelConfig, b: ModelConfig, prefix: str = ""):
    left, right = a.model_dump(mode='json'), b.model_dump(mode='json')

    def walk(x, y, prefix):
        if isinstance(x, dict) and isinstance(y, dict):
            for key in sorted(set(x) | set(y)):
                yield from walk(x.get(key), y.get(key), f"{prefix}{key}.")
        elif x != y:
            yield f"{prefix.rstrip('.')}: {y!r} != {x!r}"

    return list(walk(left, right, prefix))


def load_checkpoint(path: Union[str, Path], expected_config: Optional[ModelConfig] = None) -> MTSUNet:
    """Rebuild a model from a checkpoint.

    Args:
        path: Checkpoint written by :func:`save_checkpoint`.
        expected_config: When given, the embedded config must equal it.

    Returns:
        Model in eval mode.

    Raises:
        CheckpointError: Missing file, missing config, version or config mismatch,
            or weights that do not fit the embedded config.
    """
    path = Path(path)
    config, state_dict = _read(path)
    if expected_config is not None and config != expected_config:
        differences = '; '.join(_config_diff(expected_config, config))
        raise CheckpointError(f"{path} config does not match the expected config ({differences})")

    model = MTSUNet(config)
    first = next(iter(state_dict.values()), None)
    if first is not None and first.dtype == torch.float64:
        model = model.double()
    try:
        model.load_state_dict(state_dict)
    except RuntimeError as e:
        raise CheckpointError(f"weights in {path} do not fit the embedded config: {e}") from e
    model.eval()
    return model
