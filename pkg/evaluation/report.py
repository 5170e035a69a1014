"""Fold aggregation and metric report tables."""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DegenerateError
from models import MetricReport, MetricSummary


logger = logging.getLogger(__name__)

SUMMARY_LABEL = "mean ± std"


def aggregate_folds(values: Sequence[float]) -> MetricSummary:
    """Mean and sample standard deviation (n - 1).

    A single value is reported with std 0 and a warning.

    Raises:
        DegenerateError: If ``values`` is empty.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DegenerateError("cannot aggregate an empty list of values")
    if values.size == 1:
        logger.warning("Only one value to aggregate; reporting std 0")
        return MetricSummary(mean=float(values[0]), std=0.0, n=1)
    return MetricSummary(mean=float(values.mean()), std=float(values.std(ddof=1)), n=int(values.size))


def build_report(task: str, rows: List[Dict[str, float]], row_labels: Optional[List[str]] = None,
                 cohort: str = "cv", extra_rows: Optional[Dict[str, Dict[str, float]]] = None,
                 notes: Optional[Dict[str, Any]] = None) -> MetricReport:
    """Summarise every metric column over ``rows``; NaN entries are skipped."""
    row_labels = row_labels or [f"fold{i}" for i in range(len(rows))]
    columns = list(dict.fromkeys(key for row in rows for key in row))
    summary = {}
    for column in columns:
        finite = [row[column] for row in rows if column in row and not math.isnan(row[column])]
        if finite:
            summary[column] = aggregate_folds(finite)
        else:
            summary[column] = MetricSummary(mean=float('nan'), std=float('nan'), n=0)
    return MetricReport(task=task, cohort=cohort, row_labels=row_labels, rows=rows, summary=summary,
                        extra_rows=extra_rows or {}, notes=notes or {})


def report_to_frame(report: MetricReport) -> pd.DataFrame:
    """Rows, then the mean ± std row, then extra rows such as the ensemble."""
    records = [{'row': label, **row} for label, row in zip(report.row_labels, report.rows)]
    records.append({'row': SUMMARY_LABEL, **{k: str(v) for k, v in report.summary.items()}})
    records.extend({'row': label, **row} for label, row in report.extra_rows.items())
    frame = pd.DataFrame.from_records(records)
    frame.insert(0, 'cohort', report.cohort)
    frame.insert(0, 'task', report.task)
    return frame
