"""Semi-supervised weighted loss, class weighting, and evaluation metrics.

A pixel with a label contributes a class-weighted cross entropy; a pixel
without one contributes the entropy of the predicted distribution, scaled
by alpha and by the per-image ratio of labeled to unlabeled pixels so the
two terms stay commensurate. Pixels outside the region of interest
contribute nothing. Evaluation pools a confusion matrix over annotated
pixels and reports balanced accuracy (the mean of per-class recalls).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .ops import log_softmax_channels
from .tensor import UNLABELED

PROB_FLOOR = 1e-7  # probabilities are clamped here before logarithms


@dataclass
class ClassWeights:
    """Per-class supervised weights, zero for classes absent from the
    reference set; normalized so sum(w_i * n_i) == sum(n_i)."""

    values: np.ndarray


@dataclass
class LossConfig:
    alpha: float = 0.1  # unsupervised term scale


def class_weights(counts) -> ClassWeights:
    """Weights inversely proportional to per-class pixel counts.

    w_i = N_total / (C_present * n_i), so every present class contributes
    equally to the supervised term.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1:
        raise ShapeError(f"counts must be a vector, got shape {counts.shape}")
    if (counts < 0).any():
        raise DataError("negative class counts")
    present = counts > 0
    if not present.any():
        raise DataError("empty reference: all class counts are zero")
    total = counts.sum()
    values = np.zeros(len(counts), dtype=np.float64)
    values[present] = total / (present.sum() * counts[present])
    return ClassWeights(values=values)


def pixel_loss(probs, label: int, weights: ClassWeights, cfg: LossConfig, w_u: float) -> float:
    """Loss of one pixel: weighted cross entropy when labeled, scaled output
    entropy otherwise."""
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[0]
    if label == UNLABELED:
        logp = np.log(np.clip(probs, PROB_FLOOR, 1.0))
        return float(-cfg.alpha * w_u * (probs * logp).sum())
    if not 0 <= label < num_classes:
        raise DataError(f"invalid label {label} for {num_classes} classes")
    p = float(np.clip(probs[label], PROB_FLOOR, 1.0))
    return float(-weights.values[label] * np.log(p))


def _region_masks(labels: np.ndarray, roi: np.ndarray):
    labeled = (labels != UNLABELED) & roi
    unlabeled = (labels == UNLABELED) & roi
    return labeled, unlabeled


def image_loss(probs: np.ndarray, labels: np.ndarray, roi: np.ndarray,
               weights: ClassWeights, cfg: LossConfig):
    """Mean supervised and scaled unsupervised loss over one image.

    Returns (total, supervised, unsupervised, w_u) where
    w_u = |labeled pixels| / |unlabeled pixels| inside the roi (0 when there
    are no unlabeled pixels).
    """
    _check_loss_shapes(probs, labels, roi)
    labeled, unlabeled = _region_masks(labels, roi)
    n_lab, n_unl = int(labeled.sum()), int(unlabeled.sum())
    if n_lab == 0 and n_unl == 0:
        raise DataError("empty roi: no labeled or unlabeled pixels")

    supervised = 0.0
    if n_lab:
        y = labels[labeled].astype(np.int64)
        p = probs[:, labeled][y, np.arange(n_lab)]
        supervised = float(-(weights.values[y] * np.log(np.clip(p, PROB_FLOOR, 1.0))).mean())

    w_u = n_lab / n_unl if n_unl else 0.0
    unsupervised = 0.0
    if n_unl:
        p = probs[:, unlabeled]
        entropy = -(p * np.log(np.clip(p, PROB_FLOOR, 1.0))).sum(axis=0)
        unsupervised = float(cfg.alpha * w_u * entropy.mean())
    return supervised + unsupervised, supervised, unsupervised, w_u


def image_loss_backward(probs: np.ndarray, labels: np.ndarray, roi: np.ndarray,
                        weights: ClassWeights, cfg: LossConfig) -> np.ndarray:
    """Exact gradient of image_loss with respect to the probabilities."""
    _check_loss_shapes(probs, labels, roi)
    labeled, unlabeled = _region_masks(labels, roi)
    n_lab, n_unl = int(labeled.sum()), int(unlabeled.sum())
    if n_lab == 0 and n_unl == 0:
        raise DataError("empty roi: no labeled or unlabeled pixels")
    grad = np.zeros_like(probs)
    if n_lab:
        y = labels[labeled].astype(np.int64)
        p = probs[:, labeled][y, np.arange(n_lab)]
        g = np.where(p >= PROB_FLOOR, -weights.values[y] / np.clip(p, PROB_FLOOR, 1.0), 0.0)
        sub = np.zeros((probs.shape[0], n_lab), dtype=probs.dtype)
        sub[y, np.arange(n_lab)] = g / n_lab
        grad[:, labeled] = sub
    if n_unl:
        w_u = n_lab / n_unl
        p = probs[:, unlabeled]
        logp = np.log(np.clip(p, PROB_FLOOR, 1.0))
        # d/dp of p*log(clip(p)): log p + 1 inside the clamp, log(floor) below it
        dterm = np.where(p >= PROB_FLOOR, logp + 1.0, logp)
        grad[:, unlabeled] = -(cfg.alpha * w_u / n_unl) * dterm
    return grad


def image_loss_from_logits(logits: np.ndarray, labels: np.ndarray, roi: np.ndarray,
                           weights: ClassWeights, cfg: LossConfig):
    """Fused softmax + loss: numerically stable values and logit gradient.

    Returns (total, supervised, unsupervised, w_u, grad_logits).
    """
    _check_loss_shapes(logits, labels, roi)
    labeled, unlabeled = _region_masks(labels, roi)
    n_lab, n_unl = int(labeled.sum()), int(unlabeled.sum())
    if n_lab == 0 and n_unl == 0:
        raise DataError("empty roi: no labeled or unlabeled pixels")
    logp = log_softmax_channels(logits)
    p = np.exp(logp)
    grad = np.zeros_like(logits)

    supervised = 0.0
    if n_lab:
        y = labels[labeled].astype(np.int64)
        cols = np.arange(n_lab)
        wy = weights.values[y].astype(logits.dtype)
        supervised = float(-(wy * logp[:, labeled][y, cols]).mean())
        onehot = np.zeros((logits.shape[0], n_lab), dtype=logits.dtype)
        onehot[y, cols] = 1.0
        grad[:, labeled] = wy * (p[:, labeled] - onehot) / n_lab

    w_u = n_lab / n_unl if n_unl else 0.0
    unsupervised = 0.0
    if n_unl:
        pu, lpu = p[:, unlabeled], logp[:, unlabeled]
        entropy = -(pu * lpu).sum(axis=0)
        unsupervised = float(cfg.alpha * w_u * entropy.mean())
        grad[:, unlabeled] = -(cfg.alpha * w_u / n_unl) * pu * (lpu + entropy)
    return supervised + unsupervised, supervised, unsupervised, w_u, grad


def _check_loss_shapes(probs, labels, roi):
    if probs.ndim != 3:
        raise ShapeError(f"probs must be C x H x W, got {probs.shape}")
    if labels.shape != probs.shape[1:] or roi.shape != probs.shape[1:]:
        raise ShapeError(
            f"labels {labels.shape} / roi {roi.shape} do not match spatial size {probs.shape[1:]}"
        )


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """C x C counts, rows = truth, cols = prediction; unannotated truth
    pixels (255) are skipped."""
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
    keep = truth != UNLABELED
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise DataError(f"label codes exceed {num_classes} classes")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def per_class_accuracy(confusion: np.ndarray) -> np.ndarray:
    """Diagonal over row sums; NaN for classes with no reference pixels."""
    totals = confusion.sum(axis=1)
    acc = np.full(len(confusion), np.nan)
    present = totals > 0
    acc[present] = np.diag(confusion)[present] / totals[present]
    return acc


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Mean per-class recall over classes that have reference pixels."""
    acc = per_class_accuracy(confusion)
    present = ~np.isnan(acc)
    if not present.any():
        raise DataError("empty confusion matrix: no class has reference pixels")
    return float(acc[present].mean())


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class_acc: np.ndarray
    bacc: float
    supervised_loss: float
    unsupervised_loss: float
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_acc": [None if np.isnan(a) else float(a) for a in self.per_class_acc],
            "bacc": self.bacc,
            "supervised_loss": self.supervised_loss,
            "unsupervised_loss": self.unsupervised_loss,
            **self.extras,
        }

    @staticmethod
    def csv_header(num_classes: int) -> list[str]:
        cols = ["bacc", "supervised_loss", "unsupervised_loss"]
        cols += [f"acc_class{i}" for i in range(num_classes)]
        cols += [f"cm_{t}_{p}" for t in range(num_classes) for p in range(num_classes)]
        return cols

    def csv_row(self) -> list:
        row = [self.bacc, self.supervised_loss, self.unsupervised_loss]
        row += ["" if np.isnan(a) else float(a) for a in self.per_class_acc]
        row += [int(v) for v in self.confusion.reshape(-1)]
        return row


def report_from_confusion(confusion: np.ndarray, supervised_loss: float,
                          unsupervised_loss: float, **extras) -> EvalReport:
    return EvalReport(
        confusion=confusion,
        per_class_acc=per_class_accuracy(confusion),
        bacc=balanced_accuracy(confusion),
        supervised_loss=supervised_loss,
        unsupervised_loss=unsupervised_loss,
        extras=extras,
    )
