"""Segmentation overlap/distance metrics and confusion-table statistics."""

import logging
import math
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from errors import DegenerateError, EmptyMaskError, ShapeError
from evaluation.roc import delong_ci
from models import ConfusionCounts, MaskVolume


logger = logging.getLogger(__name__)

MaskLike = Union[MaskVolume, np.ndarray]


def _region(mask: MaskLike, label: Optional[int]) -> np.ndarray:
    labels = mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask)
    if label is None:
        return labels > 0
    return labels == label


def _pair(pred: MaskLike, gt: MaskLike, label: Optional[int]):
    p, g = _region(pred, label), _region(gt, label)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def dice(pred: MaskLike, gt: MaskLike, label: Optional[int] = 1) -> float:
    """2|P & G| / (|P| + |G|) for voxels equal to ``label`` (any foreground when None); 1.0 if both empty."""
    p, g = _pair(pred, gt, label)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred: MaskLike, gt: MaskLike, label: Optional[int] = 1) -> float:
    """|P & G| / |P | G|; 1.0 if both empty."""
    p, g = _pair(pred, gt, label)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary_voxels(region: np.ndarray) -> np.ndarray:
    """Voxel indices of the region that touch the outside under 6-connectivity."""
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(region, structure=structure, border_value=0)
    return np.argwhere(region & ~eroded)


def hausdorff(pred: MaskLike, gt: MaskLike, spacing: Sequence[float] = (1.0, 1.0, 1.0),
              label: Optional[int] = 1) -> float:
    """Symmetric Hausdorff distance in mm between boundary voxel centres.

    Raises:
        EmptyMaskError: If either region is empty.
    """
    p, g = _pair(pred, gt, label)
    if not p.any() or not g.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    scale = np.asarray(spacing, dtype=np.float64)
    a = boundary_voxels(p) * scale
    b = boundary_voxels(g) * scale
    forward = cKDTree(b).query(a)[0].max()
    backward = cKDTree(a).query(b)[0].max()
    return float(max(forward, backward))


def confusion_counts(predicted: Sequence[int], actual: Sequence[int]) -> ConfusionCounts:
    predicted = np.asarray(predicted).astype(int).ravel()
    actual = np.asarray(actual).astype(int).ravel()
    if predicted.shape != actual.shape:
        raise ShapeError(f"{predicted.size} predictions but {actual.size} labels")
    return ConfusionCounts(
        tp=int(((predicted == 1) & (actual == 1)).sum()),
        fp=int(((predicted == 1) & (actual == 0)).sum()),
        tn=int(((predicted == 0) & (actual == 0)).sum()),
        fn=int(((predicted == 0) & (actual == 1)).sum()),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def confusion_stats(counts: ConfusionCounts) -> Dict[str, float]:
    """Accuracy, sensitivity, specificity, precision, F1 and MCC.

    Any rate with a zero denominator is reported as 0.

    Raises:
        DegenerateError: If the table is empty.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if counts.total == 0:
        raise DegenerateError("confusion table is empty")
    numerator = tp * tn - fp * fn
    denominator = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return {
        'accuracy': _ratio(tp + tn, counts.total),
        'sensitivity': _ratio(tp, tp + fn),
        'specificity': _ratio(tn, tn + fp),
        'precision': _ratio(tp, tp + fp),
        'f1': _ratio(2 * tp, 2 * tp + fp + fn),
        'mcc': numerator / math.sqrt(denominator) if denominator else 0.0,
    }


def classification_metrics(labels: Sequence[int], positive_probs: Sequence[float],
                           threshold: float = 0.5, level: float = 0.95) -> Dict[str, float]:
    """Confusion statistics at ``threshold`` plus AUC with its DeLong interval.

    A single-class cohort gets NaN AUC fields and ``auc_degenerate = 1``.
    """
    labels = np.asarray(labels).astype(int)
    probs = np.asarray(positive_probs, dtype=np.float64)
    row = confusion_stats(confusion_counts((probs >= threshold).astype(int), labels))
    try:
        roc = delong_ci(probs, labels, level=level)
        row.update({'auc': roc.auc, 'auc_ci_low': roc.ci_low, 'auc_ci_high': roc.ci_high,
                    'auc_degenerate': 0.0})
    except DegenerateError as e:
        logger.warning(f"AUC undefined: {e}")
        row.update({'auc': float('nan'), 'auc_ci_low': float('nan'), 'auc_ci_high': float('nan'),
                    'auc_degenerate': 1.0})
    return row


def segmentation_regions(seg_channels: int) -> Dict[str, Optional[int]]:
    """Label per reported region; None means whole tumour."""
    if seg_channels == 2:
        return {'WT': None}
    regions = {'ET': 3, 'ED': 2, 'NCR/NET': 1}
    regions['WT'] = None
    return regions


def segmentation_metrics(pred: MaskLike, gt: MaskLike, seg_channels: int = 2,
                         spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Dict[str, float]:
    """Dice, Hausdorff and IoU per region; HD is NaN when either region is empty."""
    row = {}
    for name, label in segmentation_regions(seg_channels).items():
        row[f'dice_{name}'] = dice(pred, gt, label)
        row[f'iou_{name}'] = iou(pred, gt, label)
        try:
            row[f'hd_{name}'] = hausdorff(pred, gt, spacing, label)
        except EmptyMaskError:
            row[f'hd_{name}'] = float('nan')
    return row
