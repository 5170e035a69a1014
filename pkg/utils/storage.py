#!/usr/bin/env python3
"""Storage utility for NIfTI volumes, tables, reports, run directories and the case cache."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
import pandas as pd

from errors import OutputExistsError
from models import (
    Case,
    CodelStatus,
    Grade,
    IDHStatus,
    ManifestEntry,
    MaskVolume,
    MetricReport,
    Modality,
    RunRecord,
    Volume3D,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CACHE_ENV_VAR = "MTSUNET_CACHE"
MODALITY_FILES = {
    Modality.T1: "t1.nii.gz",
    Modality.T1C: "t1c.nii.gz",
    Modality.T2: "t2.nii.gz",
    Modality.FLAIR: "flair.nii.gz",
}
MASK_FILE = "mask.nii.gz"


def read_nifti(path: PathLike) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Read a NIfTI image.

    Returns:
        The voxel array (trailing singleton dimensions dropped) and the voxel spacing in mm.

    Raises:
        OSError: If the file is missing or unreadable; the message names the path.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        image = nib.load(str(path))
        data = np.asarray(image.dataobj)
        zooms = image.header.get_zooms()
    except Exception as e:
        raise OSError(f"could not read image {path}: {e}") from e

    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    spacing = tuple(float(z) for z in zooms[:3]) if len(zooms) >= 3 else (1.0, 1.0, 1.0)
    return data, spacing


def write_nifti(array: np.ndarray, path: PathLike, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Path:
    """Write a 3D array as NIfTI with a diagonal affine built from ``spacing``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag([*[float(s) for s in spacing], 1.0])
    image = nib.Nifti1Image(np.asarray(array), affine)
    image.header.set_zooms(tuple(float(s) for s in spacing))
    nib.save(image, str(path))
    return path


class ArtifactStorage:
    """Handles storage of cases, manifests, tables, reports and training runs."""

    def __init__(self, root: PathLike = "runs", force: bool = False):
        """Initialize storage rooted at ``root``.

        Args:
            root: Directory for run outputs.
            force: Allow overwriting existing outputs.
        """
        self.root = Path(root)
        self.force = force

    def ensure_writable(self, path: PathLike) -> Path:
        """Refuse to reuse an existing output path unless ``force`` is set."""
        path = Path(path)
        if path.exists() and not self.force:
            if not path.is_dir() or any(path.iterdir()):
                raise OutputExistsError(f"output {path} already exists (use --force to overwrite)")
        return path

    # -- cases and manifests ------------------------------------------------

    def save_case(self, case: Case, out_dir: PathLike) -> Dict[str, str]:
        """Write a case as one NIfTI file per modality plus the mask.

        Returns:
            Manifest row for the case with paths relative to ``out_dir``.
        """
        out_dir = Path(out_dir)
        case_dir = out_dir / case.case_id
        case_dir.mkdir(parents=True, exist_ok=True)

        row = {'case_id': case.case_id, 't1': '', 't1c': '', 't2': '', 'flair': '', 'mask': ''}
        for modality, volume in case.volumes.items():
            file_path = write_nifti(volume.data.astype(np.float32), case_dir / MODALITY_FILES[modality],
                                    volume.spacing)
            row[modality.value.lower()] = str(file_path.relative_to(out_dir))
        if case.mask is not None:
            file_path = write_nifti(case.mask.labels.astype(np.int16), case_dir / MASK_FILE, case.mask.spacing)
            row['mask'] = str(file_path.relative_to(out_dir))

        row.update({
            'idh': case.idh.value,
            'codel': case.codel_1p19q.value,
            'grade': case.grade.value,
            'split': case.cohort,
        })
        return row

    def write_manifest(self, rows: List[Dict[str, str]], path: PathLike) -> Path:
        """Write manifest rows to CSV in the canonical column order."""
        from volumes.manifest import MANIFEST_COLUMNS

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS).fillna('')
        frame.to_csv(path, index=False, encoding='utf-8')
        logger.info(f"Wrote manifest with {len(frame)} rows to {path}")
        return path

    # -- tables and reports -------------------------------------------------

    def save_table(self, frame: pd.DataFrame, path: PathLike) -> Tuple[Path, Path]:
        """Save a table as CSV with a JSON mirror next to it."""
        csv_path = Path(path).with_suffix('.csv')
        json_path = csv_path.with_suffix('.json')
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False)
        with open(json_path, 'w', encoding='utf-8') as f:
            json.dump(json.loads(frame.to_json(orient='records')), f, indent=2)
        logger.info(f"Saved table to {csv_path}")
        return csv_path, json_path

    def save_report(self, report: MetricReport, path: PathLike) -> Tuple[Path, Path]:
        """Save a metric report as CSV (rows plus mean ± std) and full JSON."""
        from evaluation.report import report_to_frame

        csv_path = Path(path).with_suffix('.csv')
        json_path = csv_path.with_suffix('.json')
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        report_to_frame(report).to_csv(csv_path, index=False)
        with open(json_path, 'w', encoding='utf-8') as f:
            json.dump(report.model_dump(mode='json'), f, indent=2)
        logger.info(f"Saved {report.task} report to {csv_path}")
        return csv_path, json_path

    def save_json(self, data: Any, path: PathLike) -> Path:
        """Write a pydantic model (or plain JSON data) with indentation."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if hasattr(data, 'model_dump'):
            data = data.model_dump(mode='json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, default=str)
        return path

    def load_report(self, path: PathLike) -> MetricReport:
        """Load a report from its JSON file."""
        path = Path(path)
        try:
            with open(path.with_suffix('.json'), 'r', encoding='utf-8') as f:
                return MetricReport.model_validate(json.load(f))
        except Exception as e:
            logger.error(f"Failed to load report from {path}: {e}")
            raise

    # -- runs ---------------------------------------------------------------

    def run_dir(self, name: str) -> Path:
        return self.root / name

    def fold_dir(self, name: str, fold: Optional[int]) -> Path:
        """Directory for one fold, or ``full`` for the retraining run."""
        sub = f"fold{fold}" if fold is not None else "full"
        path = self.run_dir(name) / sub
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_run_record(self, record: RunRecord, fold_dir: PathLike) -> Path:
        """Write ``history.csv`` and ``run_record.json`` for a finished run."""
        fold_dir = Path(fold_dir)
        fold_dir.mkdir(parents=True, exist_ok=True)
        n = len(record.train_losses)
        history = pd.DataFrame({
            'epoch': list(range(1, n + 1)),
            'train_loss': record.train_losses,
            'val_loss': record.val_losses if record.val_losses else [float('nan')] * n,
            'val_metric': record.val_metrics if record.val_metrics else [float('nan')] * n,
        })
        history['best'] = history['epoch'] == record.best_epoch
        history.to_csv(fold_dir / "history.csv", index=False)

        record_path = fold_dir / "run_record.json"
        with open(record_path, 'w', encoding='utf-8') as f:
            json.dump(record.model_dump(mode='json'), f, indent=2)
        return record_path

    def load_run_record(self, path: PathLike) -> RunRecord:
        path = Path(path)
        if path.is_dir():
            path = path / "run_record.json"
        with open(path, 'r', encoding='utf-8') as f:
            return RunRecord.model_validate(json.load(f))

    def list_checkpoints(self, name: str) -> List[Path]:
        """Fold checkpoints of a run, in fold order."""
        return sorted(self.run_dir(name).glob("fold*/checkpoint.pt"))


class CaseCache:
    """Compressed ``.npz`` cache of preprocessed cases keyed by source files and target size."""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls) -> Optional["CaseCache"]:
        """Cache at ``$MTSUNET_CACHE``, or None when the variable is unset."""
        directory = os.environ.get(CACHE_ENV_VAR)
        return cls(directory) if directory else None

    def _key(self, entry: ManifestEntry, target: Sequence[int]) -> Path:
        parts: List[Any] = [entry.case_id, list(target)]
        for path in [*entry.paths.values(), entry.mask]:
            if path is not None:
                stat = Path(path).stat()
                parts.append([str(path), stat.st_size, stat.st_mtime_ns])
        digest = hashlib.sha1(json.dumps(parts, sort_keys=True).encode('utf-8')).hexdigest()[:16]
        return self.directory / f"{entry.case_id}_{digest}.npz"

    def get(self, entry: ManifestEntry, target: Sequence[int]) -> Optional[Case]:
        path = self._key(entry, target)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as archive:
                meta = json.loads(str(archive['meta']))
                spacing = tuple(meta['spacing'])
                volumes = {
                    Modality(m): Volume3D(data=archive[f"vol_{m}"], spacing=spacing, modality=Modality(m))
                    for m in meta['modalities']
                }
                mask = MaskVolume(labels=archive['mask'], spacing=spacing) if meta['has_mask'] else None
        except Exception as e:
            logger.warning(f"Ignoring unreadable cache entry {path}: {e}")
            return None

        logger.debug(f"Cache hit for {entry.case_id}")
        return Case(
            case_id=entry.case_id,
            volumes=volumes,
            mask=mask,
            idh=IDHStatus(meta['idh']),
            codel_1p19q=CodelStatus(meta['codel']),
            grade=Grade(meta['grade']),
            cohort=meta['cohort'],
        )

    def put(self, case: Case, entry: ManifestEntry, target: Sequence[int]) -> Path:
        path = self._key(entry, target)
        meta = {
            'modalities': [m.value for m in case.volumes],
            'spacing': list(case.spacing),
            'has_mask': case.mask is not None,
            'idh': case.idh.value,
            'codel': case.codel_1p19q.value,
            'grade': case.grade.value,
            'cohort': case.cohort,
        }
        arrays = {f"vol_{m.value}": v.data for m, v in case.volumes.items()}
        if case.mask is not None:
            arrays['mask'] = case.mask.labels
        np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)
        return path
