"""Tests for manifest parsing, preprocessing, phantoms and case loading."""

import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import CaseError, ConfigError, DomainError, ManifestError, PhantomSpecError
from evaluation.roc import roc_auc
from models import IDHStatus, Grade, Modality, PhantomSpec, Task, Volume3D
from tests.conftest import TINY_SPEC, write_phantom_manifest
from utils.storage import CaseCache, write_nifti
from volumes.loader import load_case
from volumes.manifest import MANIFEST_COLUMNS, validate_manifest
from volumes.phantom import generate_cohort, generate_phantom
from volumes.preprocessing import crop_or_pad, crop_or_pad_array, znormalize


def _volume(data, modality=Modality.T2):
    return Volume3D(data=np.asarray(data, dtype=np.float64), modality=modality)


class TestZNormalize:
    """Test z-score standardisation."""

    def test_two_level_volume(self):
        data = np.ones((2, 2, 2))
        data[0] = 3.0
        result = znormalize(_volume(data))
        assert set(np.unique(result.data)) == {-1.0, 1.0}

    def test_moments(self):
        rng = np.random.default_rng(0)
        result = znormalize(_volume(rng.normal(5.0, 3.0, size=(8, 9, 10))))
        assert abs(result.data.mean()) < 1e-6
        assert abs(result.data.std() - 1.0) < 1e-6
        assert result.shape == (8, 9, 10)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        once = znormalize(_volume(rng.uniform(size=(6, 6, 6))))
        twice = znormalize(once)
        np.testing.assert_allclose(once.data, twice.data, atol=1e-6)

    def test_constant_volume_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = znormalize(_volume(np.full((4, 4, 4), 5.0)))
        assert np.all(result.data == 0)
        assert "Constant" in caplog.text

    def test_non_finite_rejected(self):
        data = np.ones((3, 3, 3))
        data[1, 1, 1] = np.nan
        with pytest.raises(DomainError):
            znormalize(_volume(data))


class TestCropOrPad:
    """Test center crop and zero padding."""

    def test_center_crop(self):
        data = np.arange(12 ** 3, dtype=np.float64).reshape(12, 12, 12)
        result = crop_or_pad(_volume(data), (8, 8, 8))
        np.testing.assert_array_equal(result.data, data[2:10, 2:10, 2:10])

    def test_identity(self):
        data = np.random.default_rng(2).normal(size=(8, 8, 8))
        np.testing.assert_array_equal(crop_or_pad(_volume(data), (8, 8, 8)).data, data)

    def test_pad_centered(self):
        data = np.ones((4, 4, 4))
        result = crop_or_pad(_volume(data), (8, 8, 8)).data
        assert result.shape == (8, 8, 8)
        assert result[2:6, 2:6, 2:6].sum() == 64
        assert result.sum() == 64

    def test_mixed_axes(self):
        result = crop_or_pad_array(np.ones((10, 4, 6)), (8, 8, 6))
        assert result.shape == (8, 8, 6)

    def test_idempotent(self):
        data = np.random.default_rng(3).normal(size=(11, 5, 9))
        once = crop_or_pad(_volume(data), (8, 8, 8))
        np.testing.assert_array_equal(crop_or_pad(once, (8, 8, 8)).data, once.data)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            crop_or_pad_array(np.ones((4, 4, 4)), (0, 4, 4))


class TestPhantom:
    """Test the synthetic phantom generator."""

    def test_deterministic(self):
        spec = TINY_SPEC.model_copy(update={'mismatch': True})
        a = generate_phantom(spec, seed=7)
        b = generate_phantom(spec, seed=7)
        for modality in a.volumes:
            assert a.volumes[modality].data.tobytes() == b.volumes[modality].data.tobytes()
        assert a.mask.labels.tobytes() == b.mask.labels.tobytes()
        assert (a.idh, a.grade) == (b.idh, b.grade)

    def test_mismatch_contrast(self):
        spec = TINY_SPEC.model_copy(update={'mismatch': True})
        case = generate_phantom(spec, seed=3)
        labels = case.mask.labels
        t2 = case.volumes[Modality.T2].data
        flair = case.volumes[Modality.FLAIR].data
        core, rim, background = labels == 1, labels == 2, labels == 0
        assert t2[core].mean() - t2[background].mean() >= 3 * spec.noise_sigma
        assert flair[core].mean() < flair[rim].mean()

    def test_no_mismatch_keeps_flair_core(self):
        spec = TINY_SPEC.model_copy(update={'mismatch': False})
        case = generate_phantom(spec, seed=3)
        labels = case.mask.labels
        flair = case.volumes[Modality.FLAIR].data
        assert flair[(labels == 1) | (labels == 3)].mean() > flair[labels == 2].mean()
        assert 3 in np.unique(labels)

    def test_label_rule(self):
        mutant = generate_phantom(TINY_SPEC.model_copy(update={'mismatch': True}), seed=1)
        wildtype = generate_phantom(TINY_SPEC.model_copy(update={'mismatch': False}), seed=1)
        assert (mutant.idh, mutant.grade) == (IDHStatus.MUTANT, Grade.LGG)
        assert (wildtype.idh, wildtype.grade) == (IDHStatus.WILDTYPE, Grade.HGG)

    def test_invalid_spec(self):
        with pytest.raises(PhantomSpecError):
            generate_phantom(PhantomSpec(grid_size=(16, 16, 16), core_radius=10.0), seed=0)
        with pytest.raises(PhantomSpecError):
            generate_phantom(TINY_SPEC.model_copy(update={'noise_sigma': -1.0}), seed=0)

    def test_cohort(self):
        cases = generate_cohort(10, TINY_SPEC, seed=4)
        assert [c.case_id for c in cases][:2] == ["phantom_0000", "phantom_0001"]
        assert sum(c.idh == IDHStatus.MUTANT for c in cases) == 5

    def test_separability(self):
        cases = generate_cohort(100, TINY_SPEC, seed=5)
        scores = []
        for case in cases:
            core = np.isin(case.mask.labels, (1, 3))
            scores.append(case.volumes[Modality.T2].data[core].mean()
                          - case.volumes[Modality.FLAIR].data[core].mean())
        assert roc_auc(scores, [c.label_for(Task.IDH) for c in cases]) >= 0.95


class TestManifest:
    """Test manifest validation."""

    def _write(self, tmp_path, rows):
        for name in ("a_t1", "a_t1c", "a_t2", "a_flair", "a_mask"):
            (tmp_path / f"{name}.nii.gz").write_bytes(b"")
        path = tmp_path / "manifest.csv"
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).fillna('').to_csv(path, index=False)
        return path

    def _row(self, case_id, **overrides):
        row = {'case_id': case_id, 't1': 'a_t1.nii.gz', 't1c': 'a_t1c.nii.gz', 't2': 'a_t2.nii.gz',
               'flair': 'a_flair.nii.gz', 'mask': 'a_mask.nii.gz', 'idh': 'mutant', 'codel': 'intact',
               'grade': 'LGG', 'split': 'train'}
        row.update(overrides)
        return row

    def test_well_formed(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1"), self._row("c2"), self._row("c3")])
        manifest = validate_manifest(path)
        assert len(manifest) == 3
        assert manifest.get("c2").paths[Modality.FLAIR] == tmp_path / "a_flair.nii.gz"

    def test_missing_flair_file(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1"), self._row("c2", flair="missing.nii.gz")])
        with pytest.raises(ManifestError) as excinfo:
            validate_manifest(path)
        assert excinfo.value.row == 2
        assert "row 2" in str(excinfo.value)

    def test_unknown_label_is_ineligible(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1", idh="unknown")])
        entry = validate_manifest(path).entries[0]
        assert not entry.eligible_for(Task.IDH)
        assert entry.eligible_for(Task.SEGMENTATION)
        assert Task.IDH in entry.ineligible_tasks

    def test_missing_flair_column_value(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1", flair='', t1='', mask='')])
        entry = validate_manifest(path).entries[0]
        assert not entry.eligible_for(Task.IDH)
        assert entry.eligible_for(Task.CODEL)

    def test_duplicate_case_id(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1"), self._row("c1")])
        with pytest.raises(ManifestError, match="duplicate"):
            validate_manifest(path)

    def test_unparseable_label(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1", grade="grade-9")])
        with pytest.raises(ManifestError, match="grade"):
            validate_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            validate_manifest(tmp_path / "nope.csv")

    def test_with_split(self, tmp_path):
        path = self._write(tmp_path, [self._row("c1"), self._row("c2", split="external")])
        manifest = validate_manifest(path)
        assert manifest.with_split("external").case_ids == ["c2"]
        assert len(manifest.with_split(None)) == 2


class TestLoadCase:
    """Test loading manifest entries into preprocessed cases."""

    def test_load_phantom(self, phantom_manifest):
        entry = validate_manifest(phantom_manifest).entries[0]
        case = load_case(entry, target=(16, 16, 16))
        assert case.shape == (16, 16, 16)
        assert set(case.volumes) == set(Modality)
        assert abs(case.volumes[Modality.T2].data.mean()) < 1e-4
        assert case.mask is not None

    def test_pads_to_target(self, phantom_manifest):
        entry = validate_manifest(phantom_manifest).entries[0]
        case = load_case(entry, target=(32, 32, 32))
        assert case.shape == (32, 32, 32)
        assert case.mask.labels[:8].sum() == 0

    def test_two_modality_case(self, phantom_manifest):
        entry = validate_manifest(phantom_manifest).entries[0]
        entry = entry.model_copy(update={'paths': {m: p for m, p in entry.paths.items()
                                                   if m in (Modality.T1C, Modality.T2)}})
        case = load_case(entry, target=(16, 16, 16))
        assert case.modalities == (Modality.T1C, Modality.T2)

    def test_shape_mismatch(self, phantom_manifest, tmp_path):
        entry = validate_manifest(phantom_manifest).entries[0]
        odd = write_nifti(np.ones((16, 16, 12), dtype=np.float32), tmp_path / "odd.nii.gz")
        entry = entry.model_copy(update={'paths': {**entry.paths, Modality.FLAIR: odd}})
        with pytest.raises(CaseError, match="shape"):
            load_case(entry, target=(16, 16, 16))

    def test_missing_file(self, phantom_manifest, tmp_path):
        entry = validate_manifest(phantom_manifest).entries[0]
        entry = entry.model_copy(update={'paths': {**entry.paths, Modality.T1: tmp_path / "gone.nii.gz"}})
        with pytest.raises(OSError, match="gone.nii.gz"):
            load_case(entry, target=(16, 16, 16))

    def test_cache_hit(self, phantom_manifest, tmp_path):
        entry = validate_manifest(phantom_manifest).entries[0]
        cache = CaseCache(tmp_path / "cache")
        first = load_case(entry, target=(16, 16, 16), cache=cache)
        assert len(list((tmp_path / "cache").glob("*.npz"))) == 1
        second = load_case(entry, target=(16, 16, 16), cache=cache)
        np.testing.assert_array_equal(first.volumes[Modality.T2].data, second.volumes[Modality.T2].data)
        assert second.idh == first.idh


def test_manifest_roundtrip_from_phantoms(tmp_path):
    path = write_phantom_manifest(tmp_path, n=4, seed=2)
    manifest = validate_manifest(path)
    assert manifest.case_ids == [f"phantom_{i:04d}" for i in range(4)]
    assert all(e.eligible_for(Task.IDH) for e in manifest.entries)
