"""Training: Adam with bias correction, relative-improvement early stopping,
epoch orchestration with online dihedral augmentation, and k-fold cross
validation.

One optimization step processes one sample (there is no batching): draw an
augmentation, run a train-mode forward, take the fused softmax loss
gradient at the logits, backpropagate, and apply Adam. Class weights always
come from the training portion only, and the held-out fold is touched only
to evaluate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model
from .data import DatasetManifest, SplitAssignment, augment, class_counts, hill_climb_split, load_record
from .errors import NumericError, ParameterError
from .tensor import UNLABELED
from .loss_metrics import (
    ClassWeights,
    EvalReport,
    LossConfig,
    class_weights,
    confusion_matrix,
    image_loss,
    image_loss_from_logits,
    report_from_confusion,
)
from .model import Network, NetworkConfig
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moments per parameter plus the shared hyperparameters."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(net: Network, learning_rate: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps_adam: float = 1e-8) -> OptimizerState:
    state = OptimizerState(learning_rate, beta1, beta2, eps_adam)
    for name, arr in net.named_parameters():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState) -> None:
    """Standard Adam update with bias correction, applied in place."""
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_adam)


@dataclass
class StopState:
    """Early stopping on relative metric improvement.

    An epoch is significant iff metric >= best * (1 + min_relative_improvement)
    (the boundary counts); significant epochs reset the counter and update the
    best. Stop once the counter exceeds the patience.
    """

    patience: int = 50
    min_relative_improvement: float = 0.005
    best_metric: float | None = None
    epochs_since_significant: int = 0

    def observe(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when it was significant."""
        significant = (
            self.best_metric is None
            or metric >= self.best_metric * (1.0 + self.min_relative_improvement)
        )
        if significant:
            self.best_metric = metric if self.best_metric is None else max(metric, self.best_metric)
            self.epochs_since_significant = 0
        else:
            self.epochs_since_significant += 1
        return significant

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_significant > self.patience


def should_stop(history, patience: int = 50, min_relative_improvement: float = 0.005):
    """Pure form of the stopping rule: the first epoch index (0-based) after
    which training stops, or None if the history never triggers it."""
    state = StopState(patience=patience, min_relative_improvement=min_relative_improvement)
    for epoch, metric in enumerate(history):
        state.observe(metric)
        if state.should_stop:
            return epoch
    return None


@dataclass
class TrainSettings:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    patience: int = 50
    min_relative_improvement: float = 0.005
    max_epochs: int = 500
    seed: int = 0
    stop_at_metric: float | None = None  # optional early exit for budgeted runs


def train_epoch(net: Network, records, weights: ClassWeights, loss_cfg: LossConfig,
                opt: OptimizerState, shuffle_rng, dropout_rng, augment_rng,
                context: str = "") -> dict:
    """One pass over the training records in shuffled order.

    Each record gets one random dihedral op, one train-mode forward, the
    fused loss gradient, and one Adam step. Records whose roi holds no
    usable pixel are skipped with a warning.
    """
    params = net.parameter_dict()
    order = shuffle_rng.permutation(len(records))
    totals, sups, unsups = [], [], []
    skipped = 0
    for step, idx in enumerate(order):
        record = records[int(idx)]
        sample = augment(record, int(augment_rng.integers(8)))
        if not sample.roi.any():
            log.warning("skipping %s: empty roi", sample.case_id)
            skipped += 1
            continue
        _, cache = model.forward(net, sample.image, mode="train", rng=dropout_rng)
        total, sup, unsup, _, grad_logits = image_loss_from_logits(
            cache.logits, sample.labels, sample.roi, weights, loss_cfg
        )
        if not np.isfinite(total):
            raise NumericError(
                f"non-finite loss at {context} step {step} (case {sample.case_id})"
            )
        grads = model.backward(net, cache, grad_logits=grad_logits)
        adam_step(params, grads, opt)
        totals.append(total)
        sups.append(sup)
        unsups.append(unsup)
    return {
        "steps": len(totals),
        "skipped": skipped,
        "mean_total": float(np.mean(totals)) if totals else 0.0,
        "mean_supervised": float(np.mean(sups)) if sups else 0.0,
        "mean_unsupervised": float(np.mean(unsups)) if unsups else 0.0,
    }


def evaluate(net: Network, records, weights: ClassWeights, loss_cfg: LossConfig) -> EvalReport:
    """Pooled confusion matrix and mean loss components over records."""
    c = net.config.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    sups, unsups = [], []
    for record in records:
        probs, _ = model.forward(net, record.image, mode="eval")
        pred = probs.argmax(axis=0).astype(np.uint8)
        truth = record.labels.copy()
        truth[~record.roi] = UNLABELED
        confusion += confusion_matrix(pred, truth, c)
        _, sup, unsup, _ = image_loss(probs, record.labels, record.roi, weights, loss_cfg)
        sups.append(sup)
        unsups.append(unsup)
    return report_from_confusion(confusion, float(np.mean(sups)), float(np.mean(unsups)))


def mean_unlabeled_entropy(net: Network, records) -> float:
    """Mean per-pixel output entropy over unlabeled roi pixels."""
    total, count = 0.0, 0
    for record in records:
        probs, _ = model.forward(net, record.image, mode="eval")
        mask = (record.labels == UNLABELED) & record.roi
        if mask.any():
            p = probs[:, mask]
            total += float(-(p * np.log(np.clip(p, 1e-12, 1.0))).sum())
            count += int(mask.sum())
    return total / count if count else 0.0


@dataclass
class FoldResult:
    network: Network            # parameters of the best epoch
    report: EvalReport          # evaluation of the best epoch
    best_epoch: int
    epochs_run: int
    runlog: list[dict]
    weights: ClassWeights


def run_fold(manifest: DatasetManifest, split: SplitAssignment, fold_index: int,
             config: NetworkConfig, loss_cfg: LossConfig, settings: TrainSettings,
             checkpoint_dir=None, config_hash: str | None = None) -> FoldResult:
    """Train on every case outside `fold_index` and monitor on the fold.

    Class weights are computed from the training cases only. Returns the
    parameters and report of the best-monitored epoch. `config_hash`
    overrides the stamp embedded in logs and reports (callers tracking a
    larger configuration document pass its hash here).
    """
    folds = max(split.fold_of_case.values()) + 1
    if not 0 <= fold_index < folds:
        raise ParameterError(f"fold index {fold_index} outside 0..{folds - 1}")
    held_cases = split.cases_in_fold(fold_index)
    train_cases = [c for c in manifest.case_ids() if split.fold_of_case[c] != fold_index]
    weights = class_weights(class_counts(manifest, train_cases))
    train_records = [load_record(manifest, c) for c in train_cases]
    held_records = [load_record(manifest, c) for c in held_cases]

    seed = settings.seed
    net = model.build(config, seed)
    opt = init_optimizer(net, settings.learning_rate, settings.beta1, settings.beta2, settings.eps_adam)
    stop = StopState(patience=settings.patience, min_relative_improvement=settings.min_relative_improvement)
    shuffle_rng = substream(seed, "shuffle", fold_index)
    dropout_rng = substream(seed, "dropout", fold_index)
    augment_rng = substream(seed, "augment", fold_index)
    cfg_hash = config_hash if config_hash is not None else model.config_hash(config)

    best_bacc, best_epoch = -1.0, -1
    best_params = None
    best_report = None
    runlog = []
    epochs_run = 0
    for epoch in range(settings.max_epochs):
        start = time.monotonic()
        stats = train_epoch(
            net, train_records, weights, loss_cfg, opt,
            shuffle_rng, dropout_rng, augment_rng,
            context=f"fold {fold_index} epoch {epoch}",
        )
        report = evaluate(net, held_records, weights, loss_cfg)
        epochs_run = epoch + 1
        significant = stop.observe(report.bacc)
        if report.bacc > best_bacc:
            best_bacc, best_epoch = report.bacc, epoch
            best_params = {n: a.copy() for n, a in net.named_arrays()}
            best_report = report
        runlog.append(
            {
                "epoch": epoch,
                "train_total": stats["mean_total"],
                "train_supervised": stats["mean_supervised"],
                "train_unsupervised": stats["mean_unsupervised"],
                "val_bacc": report.bacc,
                "significant": significant,
                "seconds": time.monotonic() - start,
                "seed": seed,
                "config_hash": cfg_hash,
            }
        )
        if checkpoint_dir is not None and significant:
            model.save_checkpoint(net, f"{checkpoint_dir}/fold{fold_index}_epoch{epoch:04d}.ckpt")
        if settings.stop_at_metric is not None and report.bacc >= settings.stop_at_metric:
            break
        if stop.should_stop:
            break

    for name, arr in net.named_arrays():
        arr[...] = best_params[name]
    best_report.extras.update(
        {"config_hash": cfg_hash, "seed": seed, "fold": fold_index, "best_epoch": best_epoch}
    )
    return FoldResult(
        network=net,
        report=best_report,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        runlog=runlog,
        weights=weights,
    )


@dataclass
class CvResult:
    split: SplitAssignment
    fold_reports: list[EvalReport]
    mean_bacc: float
    pooled_confusion: np.ndarray
    runlogs: list[list[dict]]


def run_cv(manifest: DatasetManifest, config: NetworkConfig, loss_cfg: LossConfig,
           settings: TrainSettings, folds: int = 5, split_iters: int = 2000,
           checkpoint_dir=None, config_hash: str | None = None) -> CvResult:
    """Hill-climb a split, then train and evaluate every fold."""
    split = hill_climb_split(manifest, folds, split_iters, substream(settings.seed, "split"))
    reports, runlogs = [], []
    pooled = np.zeros((config.num_classes, config.num_classes), dtype=np.int64)
    for fold in range(folds):
        result = run_fold(manifest, split, fold, config, loss_cfg, settings, checkpoint_dir,
                          config_hash=config_hash)
        reports.append(result.report)
        runlogs.append(result.runlog)
        pooled += result.report.confusion
    mean_bacc = float(np.mean([r.bacc for r in reports]))
    return CvResult(
        split=split,
        fold_reports=reports,
        mean_bacc=mean_bacc,
        pooled_confusion=pooled,
        runlogs=runlogs,
    )
