#!/usr/bin/env python3
"""Run configuration: YAML file plus ``section.key=value`` overrides, validated by pydantic."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError
from models import (
    TASK_MODALITIES,
    AugmentParams,
    BackboneConfig,
    ClassifierMode,
    CMDConfig,
    DSFConfig,
    ExplainConfig,
    LossWeights,
    Modality,
    ModelConfig,
    PhantomSpec,
    TAFEConfig,
    Task,
    TrainConfig,
)


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class DataSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    manifest: Optional[str] = Field(None, description="Manifest CSV; relative image paths resolve against it")
    target: Tuple[int, int, int] = Field((32, 32, 32), description="Crop/pad size after z-scoring")
    split: Optional[str] = Field("train", description="Manifest split used for training; None keeps all rows")
    cache: Optional[str] = Field(None, description="Preprocessed case cache directory (MTSUNET_CACHE wins)")


class PhantomSection(PhantomSpec):
    mismatch_fraction: float = Field(0.5, ge=0.0, le=1.0, description="Share of mismatch phantoms in a cohort")

    def spec(self) -> PhantomSpec:
        return PhantomSpec.model_validate(self.model_dump(exclude={'mismatch_fraction'}))


class TrainSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    mode: ClassifierMode = Field(ClassifierMode.AUTO, description="auto = DSF for IDH, TAFE otherwise")
    modalities: Optional[List[Modality]] = Field(None, description="Backbone inputs; None = the task's inclusion set")
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(2, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    patience: int = Field(5, ge=1)
    folds: int = Field(5, ge=2)
    deterministic: bool = True
    num_workers: int = Field(0, ge=0)
    device: str = "cpu"
    output: str = Field("runs", description="Root directory for run artifacts")


class RunConfig(BaseModel):
    """Top-level configuration file schema."""
    model_config = ConfigDict(extra='forbid')

    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    data: DataSection = Field(default_factory=DataSection)
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    tafe: TAFEConfig = Field(default_factory=TAFEConfig)
    cmd: CMDConfig = Field(default_factory=CMDConfig)
    dsf: DSFConfig = Field(default_factory=DSFConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    train: TrainSection = Field(default_factory=TrainSection)
    augment: AugmentParams = Field(default_factory=AugmentParams)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)

    def modalities_for(self, task: Task) -> Tuple[Modality, ...]:
        if self.train.modalities:
            return tuple(self.train.modalities)
        return TASK_MODALITIES[task]

    def model_config_for(self, task: Task, mode: Optional[ClassifierMode] = None) -> ModelConfig:
        modalities = self.modalities_for(task)
        backbone = BackboneConfig.model_validate(
            {**self.backbone.model_dump(), 'in_channels': len(modalities), 'input_size': self.data.target})
        return ModelConfig(task=task, mode=mode or self.train.mode, backbone=backbone, tafe=self.tafe,
                           cmd=self.cmd, dsf=self.dsf, modalities=modalities)

    def train_config(self, task: Task) -> TrainConfig:
        """Per-task training recipe.

        Raises:
            ConfigError: If the combination of sections is inconsistent for ``task``.
        """
        try:
            return TrainConfig(
                model=self.model_config_for(task),
                epochs=self.train.epochs,
                batch_size=self.train.batch_size,
                learning_rate=self.train.learning_rate,
                patience=self.train.patience,
                folds=self.train.folds,
                seed=self.seed,
                loss=self.loss,
                augment=self.augment,
                deterministic=self.train.deterministic,
                num_workers=self.train.num_workers,
                device=self.train.device,
            )
        except ValidationError as e:
            raise ConfigError(f"invalid {task.value} training config: {_describe(e)}") from e


def _describe(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in error.errors())


def parse_override(override: str) -> Tuple[List[str], Any]:
    """Split ``section.key=value`` into a key path and a YAML-parsed value."""
    key, sep, raw = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {override!r} is not of the form section.key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {override!r} has an unparseable value: {e}") from e
    return [part.strip() for part in key.split(".")], value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for override in overrides:
        path, value = parse_override(override)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {override!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
        logger.debug(f"Override {'.'.join(path)} = {value!r}")
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load a run configuration; overrides win over the file, the file wins over defaults.

    Raises:
        ConfigError: Missing or malformed file, bad override syntax, or schema
            violations (reported with their dotted keys).
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, 'r') as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"could not parse {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        data = loaded or {}

    data = apply_overrides(data, overrides)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_describe(e)}") from e
    logger.debug(f"Loaded configuration from {path or 'defaults'}")
    return config
