#!/usr/bin/env python3
"""Data models for multi-modal glioma cases, network configuration and evaluation records."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Modality(str, Enum):
    """Conventional MRI sequences."""
    T1 = "T1"
    T1C = "T1C"
    T2 = "T2"
    FLAIR = "FLAIR"


MODALITY_ORDER: Tuple[Modality, ...] = (Modality.T1, Modality.T1C, Modality.T2, Modality.FLAIR)


class IDHStatus(str, Enum):
    MUTANT = "mutant"
    WILDTYPE = "wildtype"
    UNKNOWN = "unknown"


class CodelStatus(str, Enum):
    CODELETED = "codeleted"
    INTACT = "intact"
    UNKNOWN = "unknown"


class Grade(str, Enum):
    LGG = "LGG"
    HGG = "HGG"
    UNKNOWN = "unknown"


class Task(str, Enum):
    SEGMENTATION = "segmentation"
    IDH = "idh"
    CODEL = "codel"
    GRADE = "grade"


CLASSIFICATION_TASKS: Tuple[Task, ...] = (Task.IDH, Task.CODEL, Task.GRADE)

# Modalities a case must carry to be included for a task.
TASK_MODALITIES: Dict[Task, Tuple[Modality, ...]] = {
    Task.SEGMENTATION: MODALITY_ORDER,
    Task.IDH: MODALITY_ORDER,
    Task.CODEL: (Modality.T1C, Modality.T2),
    Task.GRADE: (Modality.T1C, Modality.T2),
}

# Index 1 is the positive class for every binary task.
TASK_CLASS_NAMES: Dict[Task, Tuple[str, str]] = {
    Task.IDH: ("wildtype", "mutant"),
    Task.CODEL: ("intact", "codeleted"),
    Task.GRADE: ("LGG", "HGG"),
}

SUBREGION_LABELS: Dict[int, str] = {1: "NCR/NET", 2: "ED", 3: "ET"}

TAFE_PRESETS: Dict[str, Tuple[int, ...]] = {
    "TAFE-1": (4,),
    "TAFE-2": (3, 4),
    "TAFE-3": (2, 3, 4),
    "TAFE-4": (1, 2, 3, 4),
}


class ClassifierMode(str, Enum):
    """Which classification stream produces the final logits."""
    AUTO = "auto"
    TAFE = "tafe"
    CMD = "cmd"
    DSF = "dsf"


class Source(str, Enum):
    TAFE_ONLY = "TAFE-only"
    CMD_ONLY = "CMD-only"
    DSF = "DSF"


def _task_label(task: Task, idh: IDHStatus, codel: CodelStatus, grade: Grade) -> int:
    """Binary class index for a task, or -1 when the label is unknown."""
    if task == Task.IDH:
        return {IDHStatus.MUTANT: 1, IDHStatus.WILDTYPE: 0}.get(idh, -1)
    if task == Task.CODEL:
        return {CodelStatus.CODELETED: 1, CodelStatus.INTACT: 0}.get(codel, -1)
    if task == Task.GRADE:
        return {Grade.HGG: 1, Grade.LGG: 0}.get(grade, -1)
    return -1


def _is_eligible(task: Task, modalities, has_mask: bool, label: int) -> bool:
    if not set(TASK_MODALITIES[task]).issubset(set(modalities)):
        return False
    if task == Task.SEGMENTATION:
        return has_mask
    return label >= 0


# ---------------------------------------------------------------------------
# Volumes and cases
# ---------------------------------------------------------------------------

class Volume3D(BaseModel):
    """A single-modality intensity volume."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray = Field(description="Intensity grid of shape (D, H, W), arbitrary units")
    spacing: Tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Voxel size in mm per axis")
    modality: Modality = Field(description="MRI sequence")

    @field_validator('data', mode='before')
    @classmethod
    def _check_grid(cls, value):
        arr = np.asarray(value)
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {arr.shape}")
        return arr

    @field_validator('spacing')
    @classmethod
    def _check_spacing(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError(f"spacing components must be positive, got {value}")
        return value

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


class MaskVolume(BaseModel):
    """Integer label grid: 0 background, 1 NCR/NET, 2 ED, 3 ET (or binary whole tumour)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: np.ndarray = Field(description="Integer label grid of shape (D, H, W)")
    spacing: Tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Voxel size in mm per axis")
    label_set: Tuple[int, ...] = Field((0, 1, 2, 3), description="Declared label values")

    @field_validator('labels', mode='before')
    @classmethod
    def _check_labels(cls, value):
        arr = np.asarray(value)
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise ValueError(f"mask must be a non-empty 3D grid, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            rounded = np.rint(arr)
            if not np.array_equal(rounded, arr):
                raise ValueError("mask holds non-integer values")
            arr = rounded
        return arr.astype(np.int16)

    @model_validator(mode='after')
    def _check_label_set(self):
        present = np.unique(self.labels)
        unknown = sorted(set(present.tolist()) - set(self.label_set))
        if unknown:
            raise ValueError(f"mask labels {unknown} outside declared set {self.label_set}")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    def whole_tumor(self) -> "MaskVolume":
        """Binary mask of every non-background label."""
        return MaskVolume(labels=(self.labels > 0).astype(np.int16), spacing=self.spacing, label_set=(0, 1))


class Case(BaseModel):
    """One patient: aligned modalities, optional mask, molecular and grade labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    case_id: str
    volumes: Dict[Modality, Volume3D]
    mask: Optional[MaskVolume] = None
    idh: IDHStatus = IDHStatus.UNKNOWN
    codel_1p19q: CodelStatus = CodelStatus.UNKNOWN
    grade: Grade = Grade.UNKNOWN
    cohort: str = Field("train", description="Split or cohort tag the case came from")

    @model_validator(mode='after')
    def _check_alignment(self):
        if not self.volumes:
            raise ValueError(f"case {self.case_id} has no modalities")
        shapes = {v.shape for v in self.volumes.values()}
        spacings = {tuple(v.spacing) for v in self.volumes.values()}
        if len(shapes) > 1:
            raise ValueError(f"case {self.case_id} modalities differ in shape: {sorted(shapes)}")
        if len(spacings) > 1:
            raise ValueError(f"case {self.case_id} modalities differ in spacing: {sorted(spacings)}")
        if self.mask is not None and self.mask.shape != next(iter(shapes)):
            raise ValueError(f"case {self.case_id} mask shape {self.mask.shape} != volume shape {next(iter(shapes))}")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return next(iter(self.volumes.values())).spacing

    @property
    def modalities(self) -> Tuple[Modality, ...]:
        return tuple(m for m in MODALITY_ORDER if m in self.volumes)

    def label_for(self, task: Task) -> int:
        return _task_label(task, self.idh, self.codel_1p19q, self.grade)

    def eligible_for(self, task: Task) -> bool:
        return _is_eligible(task, self.volumes.keys(), self.mask is not None, self.label_for(task))


class ManifestEntry(BaseModel):
    """One manifest row."""
    case_id: str
    row: int = Field(description="1-based data row number in the manifest file")
    paths: Dict[Modality, Path] = Field(description="Image file per available modality")
    mask: Optional[Path] = None
    idh: IDHStatus = IDHStatus.UNKNOWN
    codel: CodelStatus = CodelStatus.UNKNOWN
    grade: Grade = Grade.UNKNOWN
    split: str = "train"

    def label_for(self, task: Task) -> int:
        return _task_label(task, self.idh, self.codel, self.grade)

    def eligible_for(self, task: Task) -> bool:
        return _is_eligible(task, self.paths.keys(), self.mask is not None, self.label_for(task))

    @property
    def ineligible_tasks(self) -> List[Task]:
        return [t for t in Task if not self.eligible_for(t)]


class Manifest(BaseModel):
    """Validated collection of manifest rows."""
    source: Optional[Path] = None
    entries: List[ManifestEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def case_ids(self) -> List[str]:
        return [e.case_id for e in self.entries]

    def get(self, case_id: str) -> Optional[ManifestEntry]:
        for entry in self.entries:
            if entry.case_id == case_id:
                return entry
        return None

    def eligible(self, task: Task) -> List[ManifestEntry]:
        return [e for e in self.entries if e.eligible_for(task)]

    def with_split(self, split: Optional[str]) -> "Manifest":
        if split is None:
            return self
        return Manifest(source=self.source, entries=[e for e in self.entries if e.split == split])


class PhantomLabelRule(BaseModel):
    """Labels assigned to generated phantoms depending on the mismatch flag."""
    model_config = ConfigDict(extra='forbid')

    mismatch_idh: IDHStatus = IDHStatus.MUTANT
    mismatch_grade: Grade = Grade.LGG
    mismatch_codel: CodelStatus = CodelStatus.INTACT
    other_idh: IDHStatus = IDHStatus.WILDTYPE
    other_grade: Grade = Grade.HGG
    other_codel: CodelStatus = CodelStatus.INTACT


class PhantomSpec(BaseModel):
    """Parameters of the synthetic spherical-lesion phantom."""
    model_config = ConfigDict(extra='forbid')

    grid_size: Tuple[int, int, int] = Field((32, 32, 32), description="Grid size in voxels")
    core_radius: float = Field(6.0, description="Tumour core radius in voxels")
    rim_thickness: float = Field(2.0, description="Peritumoral rim thickness in voxels")
    mismatch: bool = Field(True, description="Whether the T2-FLAIR mismatch sign is present")
    noise_sigma: float = Field(0.1, description="Gaussian noise sigma in intensity units")
    center_jitter: int = Field(2, description="Maximum lesion centre offset from the grid centre, voxels")
    contrast_jitter: float = Field(0.1, description="Relative per-case jitter of lesion contrasts")
    spacing: Tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Voxel size in mm")
    label_rule: PhantomLabelRule = Field(default_factory=PhantomLabelRule)

    def violations(self) -> List[str]:
        problems = []
        if min(self.grid_size) <= 0:
            problems.append(f"grid_size must be positive, got {self.grid_size}")
        if self.core_radius <= 0:
            problems.append("core_radius must be positive")
        if self.rim_thickness < 0:
            problems.append("rim_thickness must be non-negative")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if not 0 <= self.contrast_jitter < 1:
            problems.append("contrast_jitter must lie in [0, 1)")
        if self.center_jitter < 0:
            problems.append("center_jitter must be >= 0")
        extent = self.core_radius + self.rim_thickness + self.center_jitter
        if min(self.grid_size) > 0 and extent >= min(self.grid_size) / 2:
            problems.append(
                f"core_radius + rim_thickness + center_jitter = {extent} does not fit in grid {self.grid_size}")
        return problems


# ---------------------------------------------------------------------------
# Network configuration
# ---------------------------------------------------------------------------

class BackboneConfig(BaseModel):
    """Hierarchical encoder / U-Net decoder configuration."""
    model_config = ConfigDict(extra='forbid')

    in_channels: int = Field(4, ge=1, description="Number of stacked input modalities")
    base_channels: int = Field(8, ge=1, description="Channel width C of stage 1 (48 for full-size runs)")
    stages: Literal[4] = 4
    input_size: Tuple[int, int, int] = Field((32, 32, 32), description="Training crop size, divisible by 16")
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0, description="Dropout before classification heads")
    seg_channels: Literal[2, 4] = Field(2, description="2 = background/tumour, 4 = background + NCR/NET, ED, ET")
    freeze_segmentation: bool = Field(False, description="Stop gradients into the decoder")

    @field_validator('input_size')
    @classmethod
    def _check_input_size(cls, value):
        if any(s <= 0 or s % 16 for s in value):
            raise ValueError(f"input_size dims must be positive multiples of 16, got {value}")
        return value

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    def stage_spatial(self, stage: int, spatial: Optional[Tuple[int, int, int]] = None) -> Tuple[int, int, int]:
        spatial = spatial or self.input_size
        return tuple(s // 2 ** stage for s in spatial)


class StageSet(BaseModel):
    """Ordered encoder stage indices pooled by TAFE."""
    stages: Tuple[int, ...]

    @field_validator('stages')
    @classmethod
    def _check_stages(cls, value):
        if not value:
            raise ValueError("stage set must not be empty")
        if any(s not in (1, 2, 3, 4) for s in value):
            raise ValueError(f"stages must be within 1..4, got {value}")
        if list(value) != sorted(set(value)):
            raise ValueError(f"stages must be strictly ascending, got {value}")
        return value

    @classmethod
    def from_preset(cls, name: str) -> "StageSet":
        from errors import ConfigError
        if name not in TAFE_PRESETS:
            raise ConfigError(f"unknown TAFE preset {name!r}; expected one of {sorted(TAFE_PRESETS)}")
        return cls(stages=TAFE_PRESETS[name])


class TAFEConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    preset: str = Field("TAFE-4", description="TAFE-1 .. TAFE-4")
    shared_trunk: bool = Field(False, description="Train IDH, 1p/19q and grade heads in one model")

    @field_validator('preset')
    @classmethod
    def _check_preset(cls, value):
        if value not in TAFE_PRESETS:
            raise ValueError(f"unknown TAFE preset {value!r}; expected one of {sorted(TAFE_PRESETS)}")
        return value

    @property
    def stage_set(self) -> StageSet:
        return StageSet(stages=TAFE_PRESETS[self.preset])


class CMDConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    gamma: float = Field(2.0, gt=1.0, description="Difference amplification factor")
    min_gate: float = Field(0.1, gt=0.0, le=1.0, description="Lower bound of the tumour gate")
    channels: int = Field(16, ge=1, description="Feature channels k of each modality stem")
    detach_gate: bool = Field(True, description="Block gradients from the gate into the decoder")


class DSFConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    hidden_width: int = Field(16, ge=1)
    fuse_level: Literal["logits", "features"] = "logits"


class LossWeights(BaseModel):
    model_config = ConfigDict(extra='forbid')

    alpha: float = Field(1.0, ge=0.0, description="Segmentation loss weight")
    beta: float = Field(1.0, ge=0.0, description="Classification loss weight")


class ModelConfig(BaseModel):
    """Everything needed to rebuild a network, embedded in checkpoints."""
    model_config = ConfigDict(extra='forbid')

    task: Task = Task.IDH
    mode: ClassifierMode = ClassifierMode.AUTO
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    tafe: TAFEConfig = Field(default_factory=TAFEConfig)
    cmd: CMDConfig = Field(default_factory=CMDConfig)
    dsf: DSFConfig = Field(default_factory=DSFConfig)
    modalities: Tuple[Modality, ...] = Field(MODALITY_ORDER, description="Backbone input channels, in order")

    @model_validator(mode='after')
    def _check_mode(self):
        if not self.modalities:
            raise ValueError("modality subset must not be empty")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities in {self.modalities}")
        if self.backbone.in_channels != len(self.modalities):
            raise ValueError(
                f"backbone.in_channels={self.backbone.in_channels} but {len(self.modalities)} modalities selected")
        mode = self.resolved_mode
        if mode in (ClassifierMode.CMD, ClassifierMode.DSF) and Task.IDH not in self.classification_tasks:
            raise ValueError(f"mode {mode.value} requires the IDH task (T2-FLAIR mismatch stream)")
        return self

    @property
    def classification_tasks(self) -> Tuple[Task, ...]:
        if self.task == Task.SEGMENTATION:
            return ()
        if self.tafe.shared_trunk:
            return CLASSIFICATION_TASKS
        return (self.task,)

    @property
    def resolved_mode(self) -> ClassifierMode:
        if self.mode != ClassifierMode.AUTO:
            return self.mode
        return ClassifierMode.DSF if Task.IDH in self.classification_tasks else ClassifierMode.TAFE

    def mode_for(self, task: Task) -> ClassifierMode:
        """CMD streams only ever feed the IDH head."""
        return self.resolved_mode if task == Task.IDH else ClassifierMode.TAFE


class AugmentParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    enabled: bool = True
    flip_prob: float = Field(0.5, ge=0.0, le=1.0, description="Per-axis flip probability")
    rot90_prob: float = Field(0.5, ge=0.0, le=1.0)
    rotation_prob: float = Field(0.5, ge=0.0, le=1.0)
    max_rotation_deg: float = Field(15.0, ge=0.0)
    intensity_scale: Tuple[float, float] = (0.9, 1.1)
    elastic_prob: float = Field(0.3, ge=0.0, le=1.0)
    elastic_sigma: float = Field(4.0, gt=0.0, description="Smoothing of the displacement field, voxels")
    elastic_magnitude: float = Field(2.0, ge=0.0, description="Maximum displacement, voxels")


class TrainConfig(BaseModel):
    """Per-task training recipe."""
    model_config = ConfigDict(extra='forbid')

    model: ModelConfig = Field(default_factory=ModelConfig)
    epochs: int = Field(100, ge=1, description="Maximum epochs")
    batch_size: int = Field(2, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    patience: int = Field(5, ge=1)
    folds: int = Field(5, ge=2)
    seed: int = 0
    loss: LossWeights = Field(default_factory=LossWeights)
    augment: AugmentParams = Field(default_factory=AugmentParams)
    deterministic: bool = True
    num_workers: int = Field(0, ge=0)
    device: str = "cpu"

    @model_validator(mode='after')
    def _check_consistency(self):
        if self.loss.alpha + self.loss.beta <= 0:
            raise ValueError("loss.alpha + loss.beta must be positive")
        if self.task == Task.SEGMENTATION and self.loss.alpha <= 0:
            raise ValueError("segmentation training needs loss.alpha > 0")
        return self

    @property
    def task(self) -> Task:
        return self.model.task

    @property
    def modalities(self) -> Tuple[Modality, ...]:
        return self.model.modalities

    @property
    def swint_mode(self) -> bool:
        """Encoder trained without segmentation guidance."""
        return self.loss.alpha == 0


class ExplainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    patch: Tuple[int, int, int] = (16, 16, 16)
    stride: Tuple[int, int, int] = (8, 8, 8)
    fill: float = 0.0
    layer: str = "x4"
    alpha: float = Field(0.4, ge=0.0, le=1.0, description="Overlay opacity in PNG montages")
    slices: int = Field(8, ge=1, description="Axial slices in the montage")


# ---------------------------------------------------------------------------
# Training and evaluation records
# ---------------------------------------------------------------------------

class FoldPlan(BaseModel):
    """Disjoint case-id folds for k-fold cross-validation."""
    k: int
    seed: int
    folds: List[List[str]]
    class_counts: List[Dict[str, int]] = Field(default_factory=list)

    @property
    def case_ids(self) -> List[str]:
        return [cid for fold in self.folds for cid in fold]

    def val_ids(self, fold: int) -> List[str]:
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> List[str]:
        return [cid for i, f in enumerate(self.folds) if i != fold for cid in f]


class RunRecord(BaseModel):
    """Trajectory and outcome of one training run."""
    fold: Optional[int] = None
    task: Task
    max_epochs: int
    train_losses: List[float] = Field(default_factory=list)
    val_losses: List[float] = Field(default_factory=list)
    val_metrics: List[float] = Field(default_factory=list, description="AUC (classification) or Dice (segmentation)")
    best_epoch: int = 0
    stop_epoch: int = 0
    early_stopped: bool = False
    checkpoint_path: Optional[str] = None
    swint_mode: bool = False


class ConfusionCounts(BaseModel):
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class RocResult(BaseModel):
    auc: float
    delong_variance: float = Field(ge=0.0)
    ci_low: float
    ci_high: float
    level: float = 0.95
    n_positive: int
    n_negative: int


class MetricSummary(BaseModel):
    mean: float
    std: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"


class MetricReport(BaseModel):
    """Per-fold (or per-model, per-case) metric rows and their mean ± std."""
    task: str
    cohort: str = "cv"
    row_labels: List[str] = Field(default_factory=list)
    rows: List[Dict[str, float]] = Field(default_factory=list)
    summary: Dict[str, MetricSummary] = Field(default_factory=dict)
    extra_rows: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="e.g. the ensemble row")
    notes: Dict[str, Any] = Field(default_factory=dict)


class Heatmap(BaseModel):
    """Attribution map aligned to the input voxel grid."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    target_class: int
    method: Literal["occlusion", "gradcam", "attention"]
    layer: Optional[str] = None
    task: Task = Task.IDH
