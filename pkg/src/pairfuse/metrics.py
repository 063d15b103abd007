"""Class-weighted MSE loss, class weights, and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ShapeMismatch, ZeroClassCount


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights w_i = N_tot / (C * N_i)."""

    w: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.w)


@dataclass(frozen=True)
class LossBatch:
    """One-hot targets, raw network outputs, and integer labels for a batch."""

    targets: np.ndarray      # (N, C) one-hot rows
    predictions: np.ndarray  # (N, C) real-valued outputs
    labels: np.ndarray       # (N,) ints in [0, C)


def class_weights(counts) -> ClassWeights:
    """Weights countering class imbalance: w_i = N_tot / (C * N_i)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0:
        raise ShapeMismatch("counts must be a non-empty 1-D vector")
    if np.any(counts <= 0):
        raise ZeroClassCount(f"all class counts must be >= 1, got {counts.tolist()}")
    n_tot = counts.sum()
    c = len(counts)
    return ClassWeights(w=n_tot / (c * counts))


def one_hot(labels, num_classes: int) -> np.ndarray:
    """Encode integer labels as one-hot rows of length num_classes."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeMismatch("labels must be 1-D")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatch(f"labels outside [0, {num_classes})")
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_batch(batch: LossBatch, weights: ClassWeights) -> None:
    y, yh, lab = batch.targets, batch.predictions, batch.labels
    if y.shape != yh.shape or y.ndim != 2:
        raise ShapeMismatch(f"targets {y.shape} vs predictions {yh.shape}")
    if lab.shape != (y.shape[0],):
        raise ShapeMismatch(f"labels shape {lab.shape} != ({y.shape[0]},)")
    if y.shape[1] != weights.num_classes:
        raise ShapeMismatch(
            f"{y.shape[1]} output classes but {weights.num_classes} weights"
        )


def weighted_mse(batch: LossBatch, weights: ClassWeights) -> float:
    """Mean over samples of ||Y_i - Yhat_i||^2 scaled by the true class weight."""
    _check_batch(batch, weights)
    err = batch.targets - batch.predictions
    per_sample = np.sum(err * err, axis=1) * weights.w[batch.labels]
    return float(per_sample.mean())


def weighted_mse_grad(batch: LossBatch, weights: ClassWeights) -> np.ndarray:
    """Gradient of weighted_mse w.r.t. the predictions: (2/N) W_i (Yhat - Y)."""
    _check_batch(batch, weights)
    n = batch.targets.shape[0]
    w = weights.w[batch.labels][:, None]
    return (2.0 / n) * w * (batch.predictions - batch.targets)


def predict_label(logits) -> int:
    """Argmax with ties broken toward the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 1 or len(logits) == 0:
        raise ShapeMismatch("logits must be a non-empty 1-D vector")
    return int(np.argmax(logits))


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax for a (N, C) logit matrix."""
    return np.argmax(np.asarray(logits), axis=1)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0:
        raise EmptyInput("accuracy of zero samples is undefined")
    if preds.shape != labels.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts indexed [true class, predicted class]."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(preds) == 0:
        raise EmptyInput("confusion matrix of zero samples is undefined")
    if preds.shape != labels.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (labels, preds), 1)
    return mat


def per_class_f1(preds, labels, num_classes: int) -> np.ndarray:
    """F1 per class; classes with no support and no predictions score 0."""
    mat = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(mat).astype(np.float64)
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.zeros(num_classes, dtype=np.float64)
    nz = denom > 0
    f1[nz] = 2 * tp[nz] / denom[nz]
    return f1


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over all classes."""
    return float(per_class_f1(preds, labels, num_classes).mean())
