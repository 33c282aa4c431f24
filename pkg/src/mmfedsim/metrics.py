from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    per_class_f1: tuple
    macro_f1: float
    confusion: np.ndarray  # [true, predicted] counts


def macro_f1(predictions, labels, num_classes: int) -> EvalResult:
    """Unweighted mean of per-class F1 over all ``num_classes`` classes.

    A class with precision + recall == 0 (including one absent from both
    vectors) scores 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and labels must be equal-length vectors")
    for name, v in (("prediction", pred), ("label", true)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} out of range 0..{num_classes - 1}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(float)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    f1 = []
    for c in range(num_classes):
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        r = tp[c] / actual[c] if actual[c] else 0.0
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return EvalResult(tuple(f1), float(np.mean(f1)), confusion)
