"""Query scoring against prototypes, losses, and the mIoU metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassMask, FeatureMatrix
from .prototypes import PrototypeSet


def class_logits(query: FeatureMatrix, prototypes: PrototypeSet, tau_seg: float) -> np.ndarray:
    """(n, C+1) logit matrix: best prototype cosine per class over tau_seg.

    A query point's logit for class c is the maximum cosine similarity to
    any prototype of class c, divided by the temperature. Every class id
    from 0 to max(labels) must be covered by at least one prototype.
    """
    if tau_seg <= 0:
        raise ValueError(f"tau_seg must be positive, got {tau_seg}")
    if not query.normalized:
        raise ValueError("query matrix must be unit-normalized")
    if query.dim != prototypes.dim:
        raise ValueError("query and prototype dimensions differ")
    n_classes = int(prototypes.labels.max()) + 1
    sims = query.data @ prototypes.features.T
    out = np.empty((query.rows, n_classes))
    for c in range(n_classes):
        cols = prototypes.rows_for(c)
        if cols.size == 0:
            raise ValueError(f"no prototypes for class {c}")
        out[:, c] = sims[:, cols].max(axis=1) / tau_seg
    return out


def predict_mask(logits: np.ndarray) -> ClassMask:
    """Argmax over classes; ties resolve to the lower class id."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValueError("logits must be a non-empty 2-D matrix")
    return ClassMask(np.argmax(logits, axis=1))


def ce_loss(logits: np.ndarray, truth: ClassMask) -> float:
    """Mean cross-entropy of softmaxed logits against the true class ids."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D")
    n, c = logits.shape
    if truth.size != n:
        raise ValueError("mask length does not match the logit rows")
    if truth.size and (truth.labels.min() < 0 or truth.labels.max() >= c):
        raise ValueError("true class id outside the logit columns")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), truth.labels]
    return float((log_norm - picked).mean())


def total_loss(ce: float, pc: float, lam: float) -> float:
    """Cross-entropy plus lam times the contrastive term."""
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    return ce + lam * pc


@dataclass(frozen=True)
class IouReport:
    """Per-class IoU with NaN for classes absent from both masks.

    ``miou`` averages only the defined classes.
    """

    per_class: np.ndarray
    defined: np.ndarray
    miou: float


def miou(pred: ClassMask, truth: ClassMask, num_classes: int) -> IouReport:
    """Intersection-over-union per class, averaged over defined classes.

    A class is undefined when neither mask contains it (its union is empty);
    undefined classes are excluded from the mean rather than counted as 0
    or 1.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if pred.size != truth.size:
        raise ValueError("prediction and truth masks differ in length")
    for name, m in (("prediction", pred), ("truth", truth)):
        if m.size and (m.labels.min() < 0 or m.labels.max() >= num_classes):
            raise ValueError(f"{name} mask has class ids outside [0, {num_classes})")
    per = np.full(num_classes, np.nan)
    defined = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        p = pred.labels == c
        t = truth.labels == c
        union = int(np.count_nonzero(p | t))
        if union == 0:
            continue
        defined[c] = True
        per[c] = np.count_nonzero(p & t) / union
    value = float(per[defined].mean()) if defined.any() else float("nan")
    per.setflags(write=False)
    defined.setflags(write=False)
    return IouReport(per_class=per, defined=defined, miou=value)
