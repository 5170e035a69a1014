"""Tests for the command-line interface."""

import sys
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

sys.path.insert(0, str(Path(__file__).parent.parent))

from cli import EXIT_USAGE, cli
from evaluation.report import build_report
from tests.conftest import write_phantom_manifest
from utils.storage import ArtifactStorage

TINY_OVERRIDES = [
    "-o", "data.target=[16,16,16]",
    "-o", "backbone.base_channels=2",
    "-o", "cmd.channels=2",
    "-o", "dsf.hidden_width=4",
    "-o", "train.epochs=1",
    "-o", "train.folds=2",
    "-o", "augment.enabled=false",
    "-o", "explain.patch=[8,8,8]",
    "-o", "explain.stride=[8,8,8]",
]

TINY_PHANTOMS = [
    "-o", "phantom.grid_size=[16,16,16]",
    "-o", "phantom.core_radius=3",
    "-o", "phantom.rim_thickness=1.5",
    "-o", "phantom.center_jitter=1",
]


@pytest.fixture
def runner():
    return CliRunner()


class TestPhantomCommand:
    """Test phantom cohort generation."""

    def test_zero_cases(self, runner, tmp_path):
        result = runner.invoke(cli, ['phantom', '0', '--out', str(tmp_path / "out")])
        assert result.exit_code == EXIT_USAGE
        assert "nothing to generate" in result.output

    def test_writes_manifest(self, runner, tmp_path):
        out = tmp_path / "out"
        result = runner.invoke(cli, [*TINY_PHANTOMS, '--seed', '3',
                                     'phantom', '4', '--out', str(out), '--mismatch-fraction', '0.5'])
        assert result.exit_code == 0, result.output
        assert "Generated 4 phantoms (2 mismatch)" in result.output
        manifest = pd.read_csv(out / "manifest.csv")
        assert len(manifest) == 4
        assert (manifest['split'] == 'train').all()
        assert sorted(manifest['idh']) == ['mutant', 'mutant', 'wildtype', 'wildtype']

    def test_refuses_existing_output(self, runner, tmp_path):
        out = tmp_path / "out"
        args = [*TINY_PHANTOMS, 'phantom', '2', '--out', str(out)]
        assert runner.invoke(cli, args).exit_code == 0
        result = runner.invoke(cli, args)
        assert result.exit_code == EXIT_USAGE
        assert "--force" in result.output
        assert runner.invoke(cli, args + ['--force']).exit_code == 0

    def test_bad_override(self, runner, tmp_path):
        result = runner.invoke(cli, ['-o', 'phantom.grid', 'phantom', '2', '--out', str(tmp_path / "o")])
        assert result.exit_code == EXIT_USAGE

    def test_small_grid_needs_smaller_lesion(self, runner, tmp_path):
        args = ['phantom', '2', '--out', str(tmp_path / "o")]
        result = runner.invoke(cli, ['-o', 'phantom.grid_size=[16,16,16]', *args])
        assert result.exit_code == EXIT_USAGE
        assert "does not fit in grid" in result.output
        assert runner.invoke(cli, [*TINY_PHANTOMS, *args]).exit_code == 0


class TestTrainCommand:
    """Test argument and inclusion checks of the train command."""

    def test_missing_flair_is_usage_error(self, runner, tmp_path):
        manifest_path = write_phantom_manifest(tmp_path / "data", n=4)
        frame = pd.read_csv(manifest_path)
        frame['flair'] = ''
        frame.to_csv(manifest_path, index=False)

        result = runner.invoke(cli, [*TINY_OVERRIDES, '-o', f"train.output={tmp_path / 'runs'}",
                                     'train', '--task', 'idh', '--manifest', str(manifest_path)])
        assert result.exit_code == EXIT_USAGE
        assert "FLAIR" in result.output

    def test_no_manifest(self, runner, tmp_path):
        result = runner.invoke(cli, ['-o', f"train.output={tmp_path}", 'train'])
        assert result.exit_code == EXIT_USAGE
        assert "no manifest" in result.output

    def test_unknown_grid(self, runner):
        result = runner.invoke(cli, ['ablate', 'stages'])
        assert result.exit_code == 2


class TestEndToEnd:
    """Train, evaluate and explain on tiny phantoms."""

    def test_train_eval_explain(self, runner, tmp_path):
        manifest_path = write_phantom_manifest(tmp_path / "data", n=6)
        runs = tmp_path / "runs"
        base = [*TINY_OVERRIDES, '-o', f"train.output={runs}"]

        result = runner.invoke(cli, [*base, 'train', '--task', 'idh', '--manifest', str(manifest_path)])
        assert result.exit_code == 0, result.output
        assert (runs / "idh" / "report.csv").exists()
        assert (runs / "idh" / "folds.json").exists()
        checkpoints = sorted(str(p) for p in (runs / "idh").glob("fold*/checkpoint.pt"))
        assert len(checkpoints) == 2

        eval_out = tmp_path / "eval"
        result = runner.invoke(cli, [*base, 'eval', *checkpoints, '--manifest', str(manifest_path),
                                     '--out', str(eval_out)])
        assert result.exit_code == 0, result.output
        predictions = pd.read_csv(eval_out / "predictions.csv")
        assert {'case_id', 'label', 'fold0', 'fold1', 'ensemble', 'predicted'} <= set(predictions.columns)
        assert len(predictions) == 6
        assert "ensemble" in pd.read_csv(eval_out / "report.csv")['row'].tolist()

        result = runner.invoke(cli, [*base, 'eval', checkpoints[0], '--manifest', str(manifest_path),
                                     '--out', str(tmp_path / "single")])
        assert result.exit_code == 0, result.output
        assert "no ensemble column" in result.output

        case_id = predictions['case_id'][0]
        result = runner.invoke(cli, [*base, 'explain', checkpoints[0], case_id, '--manifest', str(manifest_path),
                                     '--method', 'gradcam', '--layer', 'x3', '--out', str(tmp_path / "maps")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "maps" / f"{case_id}_gradcam_x3.png").exists()

        result = runner.invoke(cli, [*base, 'explain', checkpoints[0], case_id, '--manifest', str(manifest_path),
                                     '--method', 'attention', '--out', str(tmp_path / "maps"), '--force'])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "maps" / f"{case_id}_attention_cmd.nii.gz").exists()

        result = runner.invoke(cli, [*base, 'explain', checkpoints[0], 'nobody', '--manifest', str(manifest_path),
                                     '--out', str(tmp_path / "maps2")])
        assert result.exit_code == EXIT_USAGE


class TestReportCommand:
    def _save(self, root, name, auc):
        storage = ArtifactStorage(root)
        storage.save_report(build_report("idh", [{'auc': auc}, {'auc': auc + 0.1}]), root / name / "report")
        return root / name / "report.json"

    def test_single_report(self, runner, tmp_path):
        result = runner.invoke(cli, ['report', str(self._save(tmp_path, "a", 0.7))])
        assert result.exit_code == 0, result.output
        assert "auc" in result.output
        assert "source" not in result.output

    def test_merged_csv(self, runner, tmp_path):
        paths = [str(self._save(tmp_path, "a", 0.7)), str(self._save(tmp_path, "b", 0.8))]
        result = runner.invoke(cli, ['report', *paths, '--format', 'csv'])
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0].startswith("source,")
        assert len(lines) == 1 + 2 * 3
