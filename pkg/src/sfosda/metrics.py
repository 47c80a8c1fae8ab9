"""Open-set evaluation: OS*, UNK and their harmonic mean HOS."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from sfosda.errors import InvalidInputError
from sfosda.model import ModelParams, predict_logits


@dataclass
class EvalResult:
    per_class_acc: np.ndarray  # NaN for known classes absent from the labels
    os_star: float
    unk: float | None
    hos: float | None
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "per_class_acc": [None if np.isnan(v) else float(v) for v in self.per_class_acc],
            "os_star": self.os_star,
            "unk": self.unk,
            "hos": self.hos,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(
            np.array([np.nan if v is None else v for v in d["per_class_acc"]], dtype=np.float64),
            d["os_star"], d["unk"], d["hos"], np.array(d["confusion"], dtype=np.int64),
        )


def hos(os_star: float, unk: float) -> float:
    """Harmonic mean, defined as 0 when both arguments are 0."""
    denom = os_star + unk
    return 0.0 if denom == 0 else 2.0 * os_star * unk / denom


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise InvalidInputError("prediction and truth lengths differ")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InvalidInputError(f"{name} label out of range [0, {n_classes - 1}]")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return counts


def evaluate_predictions(pred, truth, n_known: int) -> EvalResult:
    n_total = n_known + 1
    conf = confusion_matrix(pred, truth, n_total)
    support = conf.sum(axis=1)
    acc = np.full(n_total, np.nan)
    present = support > 0
    acc[present] = np.diag(conf)[present] / support[present]
    known_acc = acc[:n_known]
    if np.any(np.isnan(known_acc)):
        missing = np.flatnonzero(np.isnan(known_acc)).tolist()
        warnings.warn(f"known classes {missing} have no samples; excluded from OS*", stacklevel=2)
    os_star = float(np.nanmean(known_acc)) if np.any(~np.isnan(known_acc)) else 0.0
    if support[n_known] == 0:
        return EvalResult(known_acc, os_star, None, None, conf)
    unk = float(acc[n_known])
    return EvalResult(known_acc, os_star, unk, hos(os_star, unk), conf)


def evaluate(student: ModelParams, features, hidden_labels, n_known: int) -> EvalResult:
    """Score argmax predictions over all C_s + 1 classes against hidden labels."""
    pred = np.argmax(predict_logits(student, features), axis=1)
    return evaluate_predictions(pred, hidden_labels, n_known)
