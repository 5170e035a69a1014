"""Ablation grids: module on/off, TAFE depth with and without segmentation guidance, MRI sequence subsets."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from errors import ConfigError
from models import (
    TAFE_PRESETS,
    ClassifierMode,
    MetricReport,
    Modality,
    TrainConfig,
)


logger = logging.getLogger(__name__)

ABLATION_GRIDS = ("modules", "depth", "sequences")
REPORTED_METRICS = ("accuracy", "f1", "mcc", "auc")

SEQUENCE_SUBSETS: Tuple[Tuple[Modality, ...], ...] = (
    (Modality.T1, Modality.T2),
    (Modality.T1C, Modality.T2),
    (Modality.T1C, Modality.FLAIR),
    (Modality.T1, Modality.T1C, Modality.T2),
    (Modality.T1, Modality.T1C, Modality.FLAIR),
    (Modality.T1, Modality.T1C, Modality.T2, Modality.FLAIR),
)

Runner = Callable[[TrainConfig, str], MetricReport]


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    column: Optional[str] = None


def _variant(base: TrainConfig, mode: Optional[ClassifierMode] = None, preset: Optional[str] = None,
             alpha: Optional[float] = None,
             modalities: Optional[Sequence[Modality]] = None) -> TrainConfig:
    data = base.model_dump()
    if mode is not None:
        data['model']['mode'] = mode
    if preset is not None:
        data['model']['tafe']['preset'] = preset
    if alpha is not None:
        data['loss']['alpha'] = alpha
    if modalities is not None:
        data['model']['modalities'] = tuple(modalities)
        data['model']['backbone']['in_channels'] = len(modalities)
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"ablation variant is invalid: {exc.errors()[0]['msg']}") from exc


def sequence_name(modalities: Sequence[Modality]) -> str:
    return "+".join(m.value for m in modalities)


def ablation_rows(grid: str, base: TrainConfig) -> List[AblationRow]:
    """Expand a named grid into concrete training configurations.

    ``modules``: TAFE-only, CMD-only and DSF, all on the base TAFE preset.
    ``depth``: TAFE-1..4 and SwinT-1..4, where SwinT is the same model trained
    without the segmentation loss.
    ``sequences``: six modality subsets, each with the TAFE and the DSF head.

    Raises:
        ConfigError: For an unknown grid name.
    """
    if grid == "modules":
        return [
            AblationRow("TAFE", _variant(base, ClassifierMode.TAFE)),
            AblationRow("CMD", _variant(base, ClassifierMode.CMD)),
            AblationRow("DSF", _variant(base, ClassifierMode.DSF)),
        ]
    if grid == "depth":
        guided = base.loss.alpha if base.loss.alpha > 0 else 1.0
        rows = [AblationRow(p, _variant(base, ClassifierMode.TAFE, p, alpha=guided)) for p in TAFE_PRESETS]
        rows += [AblationRow(p.replace("TAFE", "SwinT"), _variant(base, ClassifierMode.TAFE, p, alpha=0.0))
                 for p in TAFE_PRESETS]
        return rows
    if grid == "sequences":
        return [
            AblationRow(sequence_name(subset), _variant(base, mode, modalities=subset), column=mode.value.upper())
            for subset in SEQUENCE_SUBSETS
            for mode in (ClassifierMode.TAFE, ClassifierMode.DSF)
        ]
    raise ConfigError(f"unknown ablation grid {grid!r}; expected one of {', '.join(ABLATION_GRIDS)}")


def _summary_values(report: MetricReport) -> Dict[str, float]:
    values = {}
    for metric in REPORTED_METRICS:
        summary = report.summary.get(metric)
        values[metric] = summary.mean if summary else float('nan')
        values[f"{metric}_std"] = summary.std if summary else float('nan')
    return values


def run_ablation(grid: str, base: TrainConfig, runner: Runner) -> pd.DataFrame:
    """Run every row of a grid and tabulate mean (and std) ACC, F1, MCC and AUC.

    Args:
        grid: ``modules``, ``depth`` or ``sequences``.
        base: Configuration the variants are derived from.
        runner: Trains one variant (config, row name) and returns its cross-validation report.

    Returns:
        One row per variant; the ``sequences`` grid is pivoted to one row per
        modality subset with TAFE and DSF column groups.
    """
    rows = ablation_rows(grid, base)
    records = []
    for row in rows:
        label = f"{row.name} ({row.column})" if row.column else row.name
        logger.info(f"Ablation {grid}: running {label}")
        run_name = f"{grid}/{row.name}" + (f"_{row.column}" if row.column else "")
        report = runner(row.config, run_name)
        records.append({'row': row.name, 'column': row.column, **_summary_values(report)})

    frame = pd.DataFrame.from_records(records)
    if grid != "sequences":
        return frame.drop(columns=['column'])

    wide = frame.pivot(index='row', columns='column')
    wide.columns = [f"{column}_{metric}" for metric, column in wide.columns]
    wide = wide[[f"{c}_{m}" for c in ("TAFE", "DSF") for m in (*REPORTED_METRICS,
                                                                 *(f"{x}_std" for x in REPORTED_METRICS))]]
    order = [sequence_name(s) for s in SEQUENCE_SUBSETS]
    return wide.reindex(order).reset_index()
