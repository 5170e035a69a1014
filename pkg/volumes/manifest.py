"""Case manifest parsing and validation."""

import logging
from pathlib import Path
from typing import Dict, Optional, Type, TypeVar, Union

import pandas as pd

from errors import ManifestError
from models import (
    CodelStatus,
    Grade,
    IDHStatus,
    Manifest,
    ManifestEntry,
    Modality,
    Task,
)


logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['case_id', 't1', 't1c', 't2', 'flair', 'mask', 'idh', 'codel', 'grade', 'split']

MODALITY_COLUMNS: Dict[str, Modality] = {
    't1': Modality.T1,
    't1c': Modality.T1C,
    't2': Modality.T2,
    'flair': Modality.FLAIR,
}

E = TypeVar('E', IDHStatus, CodelStatus, Grade)


def _parse_label(raw: str, enum_cls: Type[E], column: str, path: Path, row: int) -> E:
    value = raw.strip()
    if not value:
        return enum_cls('unknown')
    for member in enum_cls:
        if member.value.lower() == value.lower():
            return member
    allowed = ', '.join(m.value for m in enum_cls)
    raise ManifestError(f"unparseable {column} label {raw!r} (expected one of: {allowed})", path=path, row=row)


def _resolve(raw: str, base_dir: Path) -> Optional[Path]:
    value = raw.strip()
    if not value:
        return None
    candidate = Path(value)
    return candidate if candidate.is_absolute() else base_dir / candidate


def validate_manifest(path: Union[str, Path], check_files: bool = True) -> Manifest:
    """Parse a manifest CSV into a validated :class:`Manifest`.

    Args:
        path: Manifest file with header ``case_id,t1,t1c,t2,flair,mask,idh,codel,grade,split``.
            Empty cells mean absent; relative paths resolve against the manifest's directory.
        check_files: Verify that every referenced image exists.

    Returns:
        Manifest with one entry per row. Rows whose label is ``unknown`` are kept;
        they are simply ineligible for the corresponding task.

    Raises:
        ManifestError: Missing manifest, missing columns, duplicate case ids,
            unparseable labels or missing image files.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError("manifest file not found", path=path)

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except Exception as e:
        raise ManifestError(f"could not parse manifest: {e}", path=path) from e

    frame.columns = [c.strip().lower() for c in frame.columns]
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"missing columns: {', '.join(missing)}", path=path)

    base_dir = path.parent
    entries = []
    seen: Dict[str, int] = {}

    for index, record in enumerate(frame.to_dict(orient='records')):
        row = index + 1
        case_id = record['case_id'].strip()
        if not case_id:
            raise ManifestError("empty case_id", path=path, row=row)
        if case_id in seen:
            raise ManifestError(f"duplicate case_id {case_id!r} (first seen in row {seen[case_id]})",
                                path=path, row=row)
        seen[case_id] = row

        paths = {}
        for column, modality in MODALITY_COLUMNS.items():
            resolved = _resolve(record[column], base_dir)
            if resolved is not None:
                paths[modality] = resolved
        mask = _resolve(record['mask'], base_dir)

        if check_files:
            for label, file_path in [*((m.value, p) for m, p in paths.items()), ('mask', mask)]:
                if file_path is not None and not file_path.exists():
                    raise ManifestError(f"{label} file not found: {file_path}", path=path, row=row)

        entry = ManifestEntry(
            case_id=case_id,
            row=row,
            paths=paths,
            mask=mask,
            idh=_parse_label(record['idh'], IDHStatus, 'idh', path, row),
            codel=_parse_label(record['codel'], CodelStatus, 'codel', path, row),
            grade=_parse_label(record['grade'], Grade, 'grade', path, row),
            split=record['split'].strip() or 'train',
        )
        entries.append(entry)

    manifest = Manifest(source=path, entries=entries)
    for task in Task:
        excluded = len(entries) - len(manifest.eligible(task))
        if excluded:
            logger.debug(f"{excluded}/{len(entries)} cases ineligible for {task.value}")
    logger.info(f"Loaded manifest {path} with {len(entries)} cases")
    return manifest
