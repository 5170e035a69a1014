"""Cross-validation trainer with early stopping on validation loss."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from errors import DataError, DegenerateError
from evaluation.metrics import classification_metrics, segmentation_metrics
from evaluation.report import build_report
from evaluation.roc import roc_auc
from models import Case, FoldPlan, MetricReport, RunRecord, Task, TrainConfig
from network.backbone import prepare_target, seg_loss
from network.checkpoint import load_checkpoint, save_checkpoint
from network.fusion import classification_loss, combine_losses
from network.model import MTSUNet
from training.data import CaseDataset, task_label_index
from training.ensemble import predict_probabilities, predict_segmentation
from training.folds import split_folds
from utils.storage import ArtifactStorage


logger = logging.getLogger(__name__)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed torch and request deterministic kernels where the backend has them."""
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


class EarlyStopping:
    """Tracks the best validation loss and stops once ``patience`` epochs without improvement have passed.

    The stop comes on the first non-improving epoch beyond the patience
    window: with the best loss at epoch ``b`` and no later improvement,
    training stops at epoch ``b + patience + 1``.
    """

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record an epoch's loss; returns True when it is a new best."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs > self.patience


@dataclass
class CrossValidationResult:
    plan: FoldPlan
    records: List[RunRecord]
    report: MetricReport

    @property
    def median_best_epoch(self) -> int:
        return max(1, int(math.ceil(np.median([r.best_epoch for r in self.records]))))


class Trainer:
    """Trains one task under a :class:`TrainConfig`, writing runs through :class:`ArtifactStorage`."""

    def __init__(self, config: TrainConfig, storage: ArtifactStorage, run_name: str = "run",
                 dtype: torch.dtype = torch.float32):
        self.config = config
        self.storage = storage
        self.run_name = run_name
        self.dtype = dtype
        self.device = torch.device(config.device)

    @property
    def task(self) -> Task:
        return self.config.task

    def eligible_cases(self, cases: Sequence[Case]) -> List[Case]:
        eligible = [c for c in cases if c.eligible_for(self.task)]
        if not eligible:
            raise DataError(f"no cases are eligible for the {self.task.value} task")
        return eligible

    def build_model(self) -> MTSUNet:
        model = MTSUNet(self.config.model).to(device=self.device, dtype=self.dtype)
        if self.config.swint_mode:
            model.freeze_segmentation()
        return model

    def batch_loss(self, model: MTSUNet, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Joint loss on one batch; only masked cases enter the segmentation term."""
        image = batch['image'].to(self.device, self.dtype)
        t2 = batch['t2'].to(self.device, self.dtype)
        flair = batch['flair'].to(self.device, self.dtype)
        output = model(image, t2, flair)
        weights = self.config.loss

        seg = None
        has_mask = batch['has_mask'].to(self.device)
        if weights.alpha > 0 and not model.segmentation_frozen and bool(has_mask.any()):
            target = prepare_target(batch['target'].to(self.device)[has_mask],
                                    self.config.model.backbone.seg_channels)
            seg = seg_loss(output.seg_logits[has_mask], target)

        cls = None
        if weights.beta > 0 and output.bundles:
            labels = batch['labels'].to(self.device)
            terms = [classification_loss(bundle.c_final, labels[:, task_label_index(task)])
                     for task, bundle in output.bundles.items()]
            cls = torch.stack(terms).mean()

        if seg is None and cls is None:
            return output.seg_logits.sum() * 0.0
        return combine_losses(seg, cls, weights)

    def _loader(self, cases: List[Case], train: bool) -> DataLoader:
        dataset = CaseDataset(cases, self.config.modalities,
                              augment_params=self.config.augment if train else None,
                              seed=self.config.seed, dtype=self.dtype)
        generator = torch.Generator().manual_seed(self.config.seed)
        return DataLoader(dataset, batch_size=self.config.batch_size, shuffle=train,
                          generator=generator, num_workers=self.config.num_workers)

    @torch.no_grad()
    def evaluate(self, model: MTSUNet, cases: List[Case]) -> Dict[str, float]:
        """Mean validation loss and the selection metric (AUC or whole-tumour Dice)."""
        model.eval()
        losses, sizes = [], []
        for batch in self._loader(cases, train=False):
            losses.append(float(self.batch_loss(model, batch)))
            sizes.append(len(batch['image']))
        val_loss = float(np.average(losses, weights=sizes))

        if self.task == Task.SEGMENTATION:
            metric = float(np.mean([segmentation_metrics(predict_segmentation(model, c), c.mask)['dice_WT']
                                    for c in cases if c.mask is not None]))
        else:
            probs = predict_probabilities(model, cases, self.task)
            try:
                metric = roc_auc(probs[:, 1], [c.label_for(self.task) for c in cases])
            except DegenerateError:
                metric = float('nan')
        return {'loss': val_loss, 'metric': metric}

    def train_fold(self, cases: Sequence[Case], fold: Optional[int], train_ids: Sequence[str],
                   val_ids: Sequence[str], epochs: Optional[int] = None) -> RunRecord:
        """Train one model, keeping the checkpoint with the lowest validation loss.

        Without validation cases the model trains for exactly ``epochs`` epochs
        and the final weights are saved.

        Raises:
            DataError: If no training case is eligible.
        """
        eligible = {c.case_id: c for c in self.eligible_cases(cases)}
        train_cases = [eligible[i] for i in train_ids if i in eligible]
        val_cases = [eligible[i] for i in val_ids if i in eligible]
        if not train_cases:
            raise DataError(f"fold {fold} has no eligible training cases for {self.task.value}")

        max_epochs = epochs or self.config.epochs
        seed_everything(self.config.seed + (fold or 0), self.config.deterministic)
        model = self.build_model()
        optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                     lr=self.config.learning_rate)
        loader = self._loader(train_cases, train=True)
        stopper = EarlyStopping(self.config.patience)
        fold_dir = self.storage.fold_dir(self.run_name, fold)
        checkpoint = fold_dir / "checkpoint.pt"
        record = RunRecord(fold=fold, task=self.task, max_epochs=max_epochs,
                           checkpoint_path=str(checkpoint), swint_mode=self.config.swint_mode)
        label = f"fold {fold}" if fold is not None else "full"

        for epoch in range(1, max_epochs + 1):
            loader.dataset.set_epoch(epoch)
            model.train()
            epoch_losses = []
            for batch in loader:
                optimizer.zero_grad()
                loss = self.batch_loss(model, batch)
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss))
            record.train_losses.append(float(np.mean(epoch_losses)))

            marker = ""
            if val_cases:
                result = self.evaluate(model, val_cases)
                record.val_losses.append(result['loss'])
                record.val_metrics.append(result['metric'])
                if stopper.step(epoch, result['loss']):
                    save_checkpoint(model, checkpoint)
                    marker = " *"
                logger.info(f"[{label}] epoch {epoch}/{max_epochs} train={record.train_losses[-1]:.4f} "
                            f"val={result['loss']:.4f} metric={result['metric']:.4f}{marker}")
            else:
                logger.info(f"[{label}] epoch {epoch}/{max_epochs} train={record.train_losses[-1]:.4f}")

            record.stop_epoch = epoch
            if val_cases and stopper.should_stop:
                record.early_stopped = True
                logger.info(f"[{label}] early stop at epoch {epoch}; best epoch {stopper.best_epoch}")
                break

        if val_cases:
            record.best_epoch = stopper.best_epoch
        else:
            save_checkpoint(model, checkpoint)
            record.best_epoch = record.stop_epoch
        self.storage.save_run_record(record, fold_dir)
        return record

    def fold_metrics(self, model: MTSUNet, cases: List[Case]) -> Dict[str, float]:
        if self.task == Task.SEGMENTATION:
            seg_channels = self.config.model.backbone.seg_channels
            rows = [segmentation_metrics(predict_segmentation(model, c), c.mask, seg_channels, c.spacing)
                    for c in cases if c.mask is not None]
            return {k: float(v) for k, v in pd.DataFrame(rows).mean().items()}
        probs = predict_probabilities(model, cases, self.task)
        return classification_metrics([c.label_for(self.task) for c in cases], probs[:, 1])

    def cross_validate(self, cases: Sequence[Case], plan: Optional[FoldPlan] = None) -> CrossValidationResult:
        """Train every fold and report best-checkpoint metrics on each validation fold."""
        eligible = self.eligible_cases(cases)
        plan = plan or split_folds(eligible, self.task, k=self.config.folds, seed=self.config.seed)
        by_id = {c.case_id: c for c in eligible}

        records, rows = [], []
        for fold in range(plan.k):
            record = self.train_fold(eligible, fold, plan.train_ids(fold), plan.val_ids(fold))
            model = load_checkpoint(record.checkpoint_path).to(self.device)
            rows.append(self.fold_metrics(model, [by_id[i] for i in plan.val_ids(fold)]))
            records.append(record)

        report = build_report(self.task.value, rows, [f"fold{i}" for i in range(plan.k)], cohort="cv",
                              notes={'swint_mode': self.config.swint_mode,
                                     'best_epochs': [r.best_epoch for r in records],
                                     'stop_epochs': [r.stop_epoch for r in records]})
        return CrossValidationResult(plan=plan, records=records, report=report)

    def retrain_full(self, cases: Sequence[Case], epochs: int) -> RunRecord:
        """Retrain on every eligible case for a fixed number of epochs."""
        eligible = self.eligible_cases(cases)
        return self.train_fold(eligible, None, [c.case_id for c in eligible], [], epochs=epochs)
