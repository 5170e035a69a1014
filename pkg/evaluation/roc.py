"""ROC AUC via midranks and DeLong confidence intervals."""

import logging
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from errors import DegenerateError, DomainError
from models import RocResult


logger = logging.getLogger(__name__)


def _split_by_class(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DomainError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("labels must be 0 or 1")
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if positives.size == 0 or negatives.size == 0:
        raise DegenerateError(
            f"AUC needs both classes (got {positives.size} positive, {negatives.size} negative)")
    return positives, negatives


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: (wins + 0.5 * ties) / (n_pos * n_neg).

    Raises:
        DegenerateError: If only one class is present.
    """
    positives, negatives = _split_by_class(scores, labels)
    m, n = positives.size, negatives.size
    ranks = rankdata(np.concatenate([positives, negatives]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def delong_variance(scores: Sequence[float], labels: Sequence[int]) -> float:
    """DeLong structural-component variance of the AUC."""
    positives, negatives = _split_by_class(scores, labels)
    m, n = positives.size, negatives.size
    combined = rankdata(np.concatenate([positives, negatives]))
    # fraction of negatives each positive beats, and of positives above each negative
    v10 = (combined[:m] - rankdata(positives)) / n
    v01 = 1.0 - (combined[m:] - rankdata(negatives)) / m
    s10 = np.var(v10, ddof=1) if m > 1 else 0.0
    s01 = np.var(v01, ddof=1) if n > 1 else 0.0
    return float(s10 / m + s01 / n)


def delong_ci(scores: Sequence[float], labels: Sequence[int], level: float = 0.95) -> RocResult:
    """AUC with a normal-approximation DeLong confidence interval clipped to [0, 1].

    Raises:
        DegenerateError: If only one class is present.
        DomainError: If ``level`` is not in (0, 1).
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    auc = roc_auc(scores, labels)
    variance = delong_variance(scores, labels)
    half_width = norm.ppf(1.0 - (1.0 - level) / 2.0) * np.sqrt(variance)
    labels = np.asarray(labels).ravel()
    return RocResult(
        auc=auc,
        delong_variance=variance,
        ci_low=float(max(0.0, auc - half_width)),
        ci_high=float(min(1.0, auc + half_width)),
        level=level,
        n_positive=int((labels == 1).sum()),
        n_negative=int((labels == 0).sum()),
    )
