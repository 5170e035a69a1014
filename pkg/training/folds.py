"""Stratified k-fold partitioning of eligible cases."""

import logging
import warnings
from collections import Counter
from typing import List, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

from errors import DataError, StratifyWarning
from models import Case, Manifest, ManifestEntry, FoldPlan, Task


logger = logging.getLogger(__name__)

Items = Union[Manifest, Sequence[Case], Sequence[ManifestEntry]]


def eligible_labels(items: Items, task: Task) -> List[Tuple[str, int]]:
    """(case_id, label) for every item eligible for ``task``, sorted by case id."""
    entries = items.entries if isinstance(items, Manifest) else list(items)
    pairs = [(item.case_id, item.label_for(task)) for item in entries if item.eligible_for(task)]
    return sorted(pairs)


def split_folds(items: Items, task: Task, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deterministic stratified partition of the eligible cases into ``k`` folds.

    Classes with at least ``k`` members are stratified with scikit-learn.
    Rarer classes trigger a :class:`StratifyWarning` and are dealt round-robin
    to the currently smallest folds. Segmentation cases carry no class and are
    split with plain shuffled k-fold.

    Raises:
        DataError: If fewer than ``k`` cases are eligible.
    """
    pairs = eligible_labels(items, task)
    if len(pairs) < k:
        raise DataError(f"{len(pairs)} eligible cases for {task.value}; need at least {k} for {k}-fold CV")

    ids = np.array([cid for cid, _ in pairs])
    labels = np.array([label for _, label in pairs])
    folds: List[List[str]] = [[] for _ in range(k)]

    counts = Counter(labels.tolist())
    common = np.array([counts[label] >= k for label in labels])
    rare_classes = sorted(label for label, count in counts.items() if count < k)

    common_idx = np.flatnonzero(common)
    if common_idx.size:
        if len({labels[i] for i in common_idx}) > 1:
            splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
            splits = splitter.split(common_idx, labels[common_idx])
        else:
            splits = KFold(n_splits=k, shuffle=True, random_state=seed).split(common_idx)
        for fold, (_, val_idx) in enumerate(splits):
            folds[fold].extend(ids[common_idx[val_idx]].tolist())

    if rare_classes:
        message = (f"classes {rare_classes} have fewer than {k} members for {task.value}; "
                   f"assigning them without stratification")
        warnings.warn(message, StratifyWarning)
        logger.warning(message)
        rng = np.random.default_rng(seed)
        rare_ids = rng.permutation(ids[~common]).tolist()
        for case_id in rare_ids:
            smallest = min(range(k), key=lambda i: (len(folds[i]), i))
            folds[smallest].append(case_id)

    label_of = dict(pairs)
    folds = [sorted(fold) for fold in folds]
    class_counts = [
        {str(label): count for label, count in sorted(Counter(label_of[cid] for cid in fold).items())}
        for fold in folds
    ]
    logger.info(f"Split {len(pairs)} {task.value} cases into {k} folds: {[len(f) for f in folds]}")
    return FoldPlan(k=k, seed=seed, folds=folds, class_counts=class_counts)
