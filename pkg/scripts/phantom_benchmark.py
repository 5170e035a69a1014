#!/usr/bin/env -S uv run --script
# /// script
# dependencies = [
#   "pydantic>=2.0",
#   "pyyaml",
#   "pandas",
#   "tabulate",
#   "numpy",
#   "scipy",
#   "torch",
#   "nibabel",
#   "scikit-learn",
# ]
# ///
"""Phantom learnability benchmark: cross-validated IDH ensembles on synthetic mismatch phantoms."""

import argparse
import logging
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tabulate import tabulate

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from evaluation.roc import roc_auc
from explain.attention import attention_contrast, attention_map
from explain.gradcam import gradcam
from explain.occlusion import occlusion_map
from models import Case, PhantomSpec, Task
from network.checkpoint import load_checkpoint
from network.model import MTSUNet
from training.ensemble import average_probabilities, predict_probabilities
from training.trainer import Trainer
from utils.config import RunConfig, load_config
from utils.storage import ArtifactStorage
from volumes.phantom import generate_cohort
from volumes.preprocessing import znormalize


logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MODES = ("tafe", "cmd", "dsf")


def normalized_cohort(n: int, spec: PhantomSpec, seed: int, prefix: str) -> List[Case]:
    """Phantoms z-scored per modality, as the loader would deliver them."""
    cases = generate_cohort(n, spec, seed=seed, prefix=prefix)
    return [c.model_copy(update={'volumes': {m: znormalize(v) for m, v in c.volumes.items()}}) for c in cases]


def benchmark_config(seed: int, epochs: int, mode: str = "dsf", alpha: float = 1.0,
                     preset: str = "TAFE-4") -> RunConfig:
    return load_config(overrides=[
        f"seed={seed}",
        f"train.epochs={epochs}",
        f"train.mode={mode}",
        f"loss.alpha={alpha}",
        f"tafe.preset={preset}",
    ])


def heldout_auc(models: Sequence[MTSUNet], cases: Sequence[Case]) -> float:
    """AUC of the probability-averaged ensemble on ``cases``."""
    probs = average_probabilities([predict_probabilities(m, cases, Task.IDH) for m in models])
    return roc_auc(probs[:, 1], [c.label_for(Task.IDH) for c in cases])


def run_learnability(train_cases: Sequence[Case], test_cases: Sequence[Case], config: RunConfig,
                     out_root: Path, run_name: str) -> Dict[str, float]:
    """Cross-validate on ``train_cases`` and score the fold ensemble on ``test_cases``."""
    storage = ArtifactStorage(out_root, force=True)
    trainer = Trainer(config.train_config(Task.IDH), storage, run_name=run_name)
    result = trainer.cross_validate(list(train_cases))
    models = [load_checkpoint(r.checkpoint_path) for r in result.records]
    return {
        'cv_auc': result.report.summary['auc'].mean,
        'heldout_auc': heldout_auc(models, test_cases),
        'median_best_epoch': result.median_best_epoch,
    }


def localization_rate(model: MTSUNet, cases: Sequence[Case], patch: int = 8, stride: int = 8) -> Dict[str, float]:
    """Share of correctly classified cases whose maps point at the lesion.

    Occlusion passes when its maximum lies inside the lesion bounding box;
    Grad-CAM passes when its mean inside the mask exceeds the mean outside.
    """
    probs = predict_probabilities(model, cases, Task.IDH)
    occlusion_hits, gradcam_hits, n_correct = 0, 0, 0
    for case, prob in zip(cases, probs):
        if int(prob.argmax()) != case.label_for(Task.IDH):
            continue
        n_correct += 1
        tumour = case.mask.labels > 0
        box = [slice(idx.min(), idx.max() + 1) for idx in np.nonzero(tumour)]

        occlusion = occlusion_map(model, case, (patch,) * 3, (stride,) * 3, task=Task.IDH)
        peak = np.unravel_index(np.argmax(occlusion.values), occlusion.values.shape)
        occlusion_hits += all(s.start <= p < s.stop for s, p in zip(box, peak))

        cam = gradcam(model, case, layer="x3", task=Task.IDH).values
        gradcam_hits += cam[tumour].mean() > cam[~tumour].mean()

    if n_correct == 0:
        return {'correct': 0, 'occlusion': float('nan'), 'gradcam': float('nan')}
    return {'correct': n_correct, 'occlusion': occlusion_hits / n_correct, 'gradcam': gradcam_hits / n_correct}


def attention_rate(model: MTSUNet, cases: Sequence[Case]) -> float:
    """Share of mismatch phantoms whose CMD attention is higher in the core than in the background."""
    mutant = [c for c in cases if c.idh == PhantomSpec().label_rule.mismatch_idh and c.mask is not None]
    if not mutant:
        return float('nan')
    hits = sum(attention_contrast(attention_map(model, c, Task.IDH), c) > 0 for c in mutant)
    return hits / len(mutant)


def main(
argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Phantom learnability benchmark')
    parser.add_argument('--n-train', type=int, default=100, help='Cross-validation phantoms')
    parser.add_argument('--n-test', type=int, default=40, help='Held-out phantoms')
    parser.add_argument('--epochs', type=int, default=30, help='Maximum epochs per fold')
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='Seeds for the SwinT comparison')
    parser.add_argument('--out', type=Path, default=None, help='Run directory (temporary when omitted)')
    parser.add_argument('--skip-explain', action='store_true', help='Skip the attention and localization checks')
    args = parser.parse_args(argv)

    spec = PhantomSpec()
    with tempfile.TemporaryDirectory() as tmp:
        out_root = args.out or Path(tmp)
        rows = []
        for seed in args.seeds:
            train_cases = normalized_cohort(args.n_train, spec, seed, "train")
            test_cases = normalized_cohort(args.n_test, spec, seed + 10_000, "test")
            for mode in MODES:
                result = run_learnability(train_cases, test_cases, benchmark_config(seed, args.epochs, mode),
                                          out_root, f"seed{seed}/{mode}")
                rows.append({'seed': seed, 'variant': mode.upper(), **result})
            swint = run_learnability(train_cases, test_cases,
                                     benchmark_config(seed, args.epochs, "tafe", alpha=0.0), out_root,
                                     f"seed{seed}/swint")
            rows.append({'seed': seed, 'variant': "SwinT-4", **swint})

        print(tabulate(rows, headers='keys', tablefmt='grid', floatfmt='.4f'))

        failures = []
        for seed in args.seeds:
            by_variant = {r['variant']: r['heldout_auc'] for r in rows if r['seed'] == seed}
            if by_variant['DSF'] < 0.90:
                failures.append(f"seed {seed}: DSF held-out AUC {by_variant['DSF']:.4f} < 0.90")
            if by_variant['DSF'] < max(by_variant['TAFE'], by_variant['CMD']) - 0.02:
                failures.append(f"seed {seed}: DSF trails the single streams")
            if by_variant['TAFE'] < by_variant['SwinT-4'] - 0.02:
                failures.append(f"seed {seed}: SwinT-4 beats guided TAFE-4")

            if args.skip_explain:
                continue
            dsf_model = load_checkpoint(out_root / f"seed{seed}/dsf/fold0/checkpoint.pt")
            rate = attention_rate(dsf_model, normalized_cohort(args.n_test, spec, seed + 10_000, "test"))
            print(f"seed {seed}: CMD attention favours the mismatch core on {rate:.2%} of mismatch cases")
            if not rate >= 0.8:
                failures.append(f"seed {seed}: CMD attention on the mismatch core below 80%")

        if not args.skip_explain:
            seed = args.seeds[0]
            checkpoint = out_root / f"seed{seed}/dsf/fold0/checkpoint.pt"
            rates = localization_rate(load_checkpoint(checkpoint),
                                      normalized_cohort(args.n_test, spec, seed + 10_000, "test"))
            print(f"\nLocalization on {rates['correct']} correct cases: "
                  f"occlusion {rates['occlusion']:.2%}, Grad-CAM {rates['gradcam']:.2%}")
            if rates['correct'] and min(rates['occlusion'], rates['gradcam']) < 0.8:
                failures.append("localization below 80%")

    if failures:
        for failure in failures:
            print(f"❌ {failure}")
        return 1
    print("✅ All benchmark assertions hold")
    return 0


if __name__ == '__main__':
    sys.exit(main())
