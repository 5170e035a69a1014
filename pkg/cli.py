#!/usr/bin/env -S uv run --script
# /// script
# dependencies = [
#   "click",
#   "pydantic>=2.0",
#   "pyyaml",
#   "tabulate",
#   "pandas",
#   "numpy",
#   "scipy",
#   "torch",
#   "nibabel",
#   "scikit-learn",
#   "matplotlib",
# ]
# ///
"""Command-line tools for phantom generation, training, evaluation, ablation, explanation and reports."""

import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click
import numpy as np
import pandas as pd
from tabulate import tabulate

from errors import (
    CaseError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateError,
    DomainError,
    EmptyMaskError,
    ManifestError,
    PhantomSpecError,
)
from evaluation.metrics import classification_metrics, segmentation_metrics
from evaluation.report import build_report, report_to_frame
from models import TASK_MODALITIES, Manifest, ManifestEntry, Task
from training.ablation import ABLATION_GRIDS, run_ablation
from training.ensemble import average_probabilities, ensemble_segmentation, load_ensemble, predict_probabilities
from training.trainer import Trainer
from utils.config import RunConfig, load_config
from utils.storage import ArtifactStorage, CaseCache
from volumes.loader import load_case, load_cases
from volumes.manifest import validate_manifest
from volumes.phantom import generate_cohort


logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

USAGE_ERRORS = (ConfigError, ManifestError, CheckpointError, PhantomSpecError, FileNotFoundError, PermissionError)
DATA_ERRORS = (DataError, CaseError, DegenerateError, EmptyMaskError, DomainError, OSError)


def exit_codes(func):
    """Map toolkit exceptions to the 2 (usage), 3 (data) and 4 (internal) exit codes."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except USAGE_ERRORS as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(EXIT_USAGE)
        except DATA_ERRORS as e:
            click.echo(f"❌ Data error: {e}", err=True)
            sys.exit(EXIT_DATA)
        except Exception as e:
            logger.exception("Unexpected failure")
            click.echo(f"❌ Internal error: {e}", err=True)
            sys.exit(EXIT_INTERNAL)
    return wrapper


def _config(ctx) -> RunConfig:
    if 'config' not in ctx.obj:
        config = load_config(ctx.obj['config_path'], ctx.obj['overrides'])
        if ctx.obj['seed'] is not None:
            config = config.model_copy(update={'seed': ctx.obj['seed']})
        ctx.obj['config'] = config
    return ctx.obj['config']


def _cache(config: RunConfig) -> Optional[CaseCache]:
    cache = CaseCache.from_env()
    if cache is None and config.data.cache:
        cache = CaseCache(config.data.cache)
    return cache


def _manifest(config: RunConfig, manifest_path: Optional[str], split: Optional[str]) -> Manifest:
    path = manifest_path or config.data.manifest
    if not path:
        raise ConfigError("no manifest given (use --manifest or data.manifest)")
    return validate_manifest(path).with_split(split)


def _eligible(manifest: Manifest, task: Task) -> List[ManifestEntry]:
    """Entries included for ``task``; an empty cohort is a usage error."""
    entries = manifest.eligible(task)
    if not entries:
        needed = ", ".join(m.value for m in TASK_MODALITIES[task])
        label = "a mask" if task == Task.SEGMENTATION else f"a known {task.value} label"
        raise ConfigError(
            f"no case in {manifest.source} is eligible for the {task.value} task "
            f"(inclusion requires {needed} and {label}; {len(manifest)} rows checked)")
    excluded = len(manifest) - len(entries)
    if excluded:
        click.echo(f"⚠️  {excluded} of {len(manifest)} cases excluded from {task.value} (inclusion rules)")
    return entries


def _print_frame(frame: pd.DataFrame) -> None:
    click.echo(tabulate(frame.to_dict(orient='list'), headers='keys', tablefmt='grid', floatfmt='.4f',
                        showindex=False))


@click.group()
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='Run configuration YAML (defaults apply when omitted)')
@click.option('--override', '-o', 'overrides', multiple=True, help='section.key=value, applied after the file')
@click.option('--seed', type=int, default=None, help='Seed for every random draw (overrides the config)')
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
@click.pass_context
def cli(ctx, config_path: Optional[str], overrides: Tuple[str, ...], seed: Optional[int], verbose: bool):
    """MTS-UNET multi-task glioma toolkit."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    ctx.ensure_object(dict)
    ctx.obj.update({'config_path': config_path, 'overrides': overrides, 'seed': seed})


@cli.command()
@click.argument('n', type=int)
@click.option('--out', '-O', 'out_dir', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--mismatch-fraction', type=float, default=None, help='Share of mismatch phantoms')
@click.option('--split', default='train', help='Split tag written to the manifest')
@click.option('--force', is_flag=True, help='Overwrite an existing output directory')
@click.pass_context
@exit_codes
def phantom(ctx, n: int, out_dir: str, mismatch_fraction: Optional[float], split: str, force: bool):
    """Generate N synthetic phantom cases and their manifest."""
    if n <= 0:
        raise ConfigError("nothing to generate (n must be positive)")
    config = _config(ctx)
    storage = ArtifactStorage(out_dir, force=force)
    out = storage.ensure_writable(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    fraction = config.phantom.mismatch_fraction if mismatch_fraction is None else mismatch_fraction
    cases = generate_cohort(n, config.phantom.spec(), seed=config.seed, mismatch_fraction=fraction)
    rows = []
    for case in cases:
        row = storage.save_case(case, out)
        row['split'] = split
        rows.append(row)
    storage.write_manifest(rows, out / "manifest.csv")

    n_mismatch = int(round(n * fraction))
    click.echo(f"✅ Generated {n} phantoms ({n_mismatch} mismatch) in {out} with seed {config.seed}")


@cli.command()
@click.option('--task', '-t', type=click.Choice([t.value for t in Task]), default=Task.IDH.value)
@click.option('--manifest', '-m', 'manifest_path', type=click.Path(), help='Manifest CSV (overrides data.manifest)')
@click.option('--run-name', help='Run directory name under train.output (defaults to the task)')
@click.option('--retrain', is_flag=True, help='Retrain on all cases for the median best epoch')
@click.option('--force', is_flag=True, help='Overwrite an existing run directory')
@click.pass_context
@exit_codes
def train(ctx, task: str, manifest_path: Optional[str], run_name: Optional[str], retrain: bool, force: bool):
    """Cross-validate one task and write fold runs plus a report."""
    config = _config(ctx)
    task = Task(task)
    train_config = config.train_config(task)
    entries = _eligible(_manifest(config, manifest_path, config.data.split), task)

    run_name = run_name or task.value
    storage = ArtifactStorage(config.train.output, force=force)
    run_dir = storage.ensure_writable(storage.run_dir(run_name))
    cases = load_cases(entries, target=config.data.target, cache=_cache(config))

    click.echo(f"🧠 Training {task.value} on {len(cases)} cases "
               f"({train_config.folds} folds, mode {train_config.model.resolved_mode.value}"
               f"{', SwinT mode' if train_config.swint_mode else ''})")
    trainer = Trainer(train_config, storage, run_name=run_name)
    result = trainer.cross_validate(cases)
    storage.save_json(train_config, run_dir / "train_config.json")
    storage.save_json(result.plan, run_dir / "folds.json")
    csv_path, _ = storage.save_report(result.report, run_dir / "report")
    _print_frame(report_to_frame(result.report))

    if retrain:
        epochs = result.median_best_epoch
        click.echo(f"\n🔁 Retraining on all {len(cases)} cases for {epochs} epochs")
        record = trainer.retrain_full(cases, epochs)
        click.echo(f"   Checkpoint: {record.checkpoint_path}")
    click.echo(f"\n✅ Report written to {csv_path}")


@cli.command(name='eval')
@click.argument('checkpoints', nargs=-1, type=click.Path(), required=True)
@click.option('--manifest', '-m', 'manifest_path', type=click.Path(), help='Manifest CSV (overrides data.manifest)')
@click.option('--task', '-t', type=click.Choice([t.value for t in Task]), default=None,
              help='Task to evaluate (defaults to the checkpoint task)')
@click.option('--split', default=None, help='Cohort (manifest split) to evaluate; all rows when omitted')
@click.option('--out', '-O', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--force', is_flag=True)
@click.pass_context
@exit_codes
def evaluate(ctx, checkpoints: Tuple[str, ...], manifest_path: Optional[str], task: Optional[str],
             split: Optional[str], out_dir: str, force: bool):
    """Evaluate one or more checkpoints; several are also averaged into an ensemble."""
    config = _config(ctx)
    models = load_ensemble(list(checkpoints))
    model_config = models[0].config
    task = Task(task) if task else model_config.task
    if task != Task.SEGMENTATION and task not in model_config.classification_tasks:
        raise ConfigError(f"checkpoints have no {task.value} head")
    if len(models) == 1:
        logger.warning("Single checkpoint: no ensemble column")
        click.echo("⚠️  Only one checkpoint given; no ensemble column")

    storage = ArtifactStorage(out_dir, force=force)
    out = storage.ensure_writable(out_dir)
    entries = _eligible(_manifest(config, manifest_path, split), task)
    cases = load_cases(entries, target=model_config.backbone.input_size, cache=_cache(config))
    cohort = split or "all"
    labels = [Path(c).parent.name or Path(c).stem for c in checkpoints]
    if len(set(labels)) < len(labels):
        labels = [f"model{i}" for i in range(len(checkpoints))]

    if task == Task.SEGMENTATION:
        seg_channels = model_config.backbone.seg_channels
        rows = [segmentation_metrics(ensemble_segmentation(models, case), case.mask, seg_channels, case.spacing)
                for case in cases]
        report = build_report(task.value, rows, [c.case_id for c in cases], cohort=cohort,
                              notes={'checkpoints': list(checkpoints)})
        predictions = pd.DataFrame([{'case_id': c.case_id, **row} for c, row in zip(cases, rows)])
    else:
        truth = [c.label_for(task) for c in cases]
        member_probs = [predict_probabilities(model, cases, task) for model in models]
        rows = [classification_metrics(truth, probs[:, 1]) for probs in member_probs]
        predictions = pd.DataFrame({'case_id': [c.case_id for c in cases], 'label': truth})
        for label, probs in zip(labels, member_probs):
            predictions[label] = probs[:, 1]
        extra = {}
        if len(models) > 1:
            mean = average_probabilities(member_probs)
            predictions['ensemble'] = mean[:, 1]
            extra['ensemble'] = classification_metrics(truth, mean[:, 1])
        final = predictions['ensemble'] if len(models) > 1 else predictions[labels[0]]
        predictions['predicted'] = (np.asarray(final) >= 0.5).astype(int)
        report = build_report(task.value, rows, labels, cohort=cohort, extra_rows=extra,
                              notes={'checkpoints': list(checkpoints)})

    storage.save_table(predictions, out / "predictions")
    csv_path, _ = storage.save_report(report, out / "report")
    _print_frame(report_to_frame(report))
    click.echo(f"\n✅ Evaluated {len(cases)} {cohort} cases; report written to {csv_path}")


@cli.command()
@click.argument('grid', type=click.Choice(list(ABLATION_GRIDS)))
@click.option('--task', '-t', type=click.Choice([t.value for t in Task if t != Task.SEGMENTATION]),
              default=Task.IDH.value)
@click.option('--manifest', '-m', 'manifest_path', type=click.Path())
@click.option('--force', is_flag=True)
@click.pass_context
@exit_codes
def ablate(ctx, grid: str, task: str, manifest_path: Optional[str], force: bool):
    """Run an ablation grid (modules, depth or sequences) and write its table."""
    config = _config(ctx)
    task = Task(task)
    base = config.train_config(task)
    entries = _eligible(_manifest(config, manifest_path, config.data.split), task)
    if grid == "sequences":
        entries = [e for e in entries if len(e.paths) == 4]
        if not entries:
            raise ConfigError("the sequences grid needs cases with all four modalities")

    storage = ArtifactStorage(config.train.output, force=force)
    out = storage.ensure_writable(storage.run_dir(f"ablate_{grid}"))
    cases = load_cases(entries, target=config.data.target, cache=_cache(config))

    def runner(variant, name):
        return Trainer(variant, storage, run_name=f"ablate_{grid}/{name}").cross_validate(cases).report

    table = run_ablation(grid, base, runner)
    csv_path, _ = storage.save_table(table, out / f"ablation_{grid}")
    _print_frame(table)
    click.echo(f"\n✅ {len(table)} rows written to {csv_path}")


@cli.command()
@click.argument('checkpoint', type=click.Path())
@click.argument('case_id')
@click.option('--manifest', '-m', 'manifest_path', type=click.Path())
@click.option('--method', type=click.Choice(['occlusion', 'gradcam', 'attention']), default='occlusion')
@click.option('--layer', default=None, help='Grad-CAM layer: x1..x4, cmd_t2, cmd_flair')
@click.option('--task', '-t', type=click.Choice([t.value for t in Task if t != Task.SEGMENTATION]), default=None)
@click.option('--target-class', type=click.IntRange(0, 1), default=None, help='Defaults to the predicted class')
@click.option('--out', '-O', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--force', is_flag=True)
@click.pass_context
@exit_codes
def explain(ctx, checkpoint: str, case_id: str, manifest_path: Optional[str], method: str, layer: Optional[str],
            task: Optional[str], target_class: Optional[int], out_dir: str, force: bool):
    """Write an occlusion, Grad-CAM or CMD attention heatmap (NIfTI + PNG montage) for one case."""
    from explain.attention import attention_map
    from explain.gradcam import gradcam
    from explain.occlusion import occlusion_map
    from explain.render import save_heatmap
    from network.checkpoint import load_checkpoint

    config = _config(ctx)
    model = load_checkpoint(checkpoint)
    task = Task(task) if task else model.config.task
    if task not in model.config.classification_tasks:
        raise ConfigError(f"checkpoint has no {task.value} head to explain")

    entry = _manifest(config, manifest_path, None).get(case_id)
    if entry is None:
        raise ConfigError(f"case {case_id!r} is not in the manifest")
    storage = ArtifactStorage(out_dir, force=force)
    out = storage.ensure_writable(out_dir)
    case = load_case(entry, target=model.config.backbone.input_size, cache=_cache(config))

    settings = config.explain
    if method == 'occlusion':
        heatmap = occlusion_map(model, case, settings.patch, settings.stride, settings.fill, task=task,
                                target_class=target_class)
    elif method == 'attention':
        heatmap = attention_map(model, case, task=task)
    else:
        heatmap = gradcam(model, case, layer or settings.layer, target_class=target_class, task=task)

    nifti_path, png_path = save_heatmap(heatmap, case, out, alpha=settings.alpha, slices=settings.slices)
    click.echo(f"✅ {method} heatmap for {case_id} (class {heatmap.target_class}, "
               f"range {heatmap.values.min():.4f}..{heatmap.values.max():.4f})")
    click.echo(f"   {nifti_path}\n   {png_path}")


@cli.command()
@click.argument('paths', nargs=-1, type=click.Path(exists=True), required=True)
@click.option('--format', '-f', 'fmt', type=click.Choice(['table', 'csv']), default='table')
@click.pass_context
@exit_codes
def report(ctx, paths: Tuple[str, ...], fmt: str):
    """Print saved reports; several are merged into one table."""
    storage = ArtifactStorage()
    frames = []
    for path in paths:
        frame = report_to_frame(storage.load_report(path))
        frame.insert(0, 'source', Path(path).parent.name or Path(path).stem)
        frames.append(frame)
    merged = pd.concat(frames, ignore_index=True)
    if len(paths) == 1:
        merged = merged.drop(columns=['source'])

    if fmt == 'csv':
        click.echo(merged.to_csv(index=False))
    else:
        click.echo(f"\n📊 {len(paths)} report(s)\n")
        _print_frame(merged)


if __name__ == '__main__':
    cli()
