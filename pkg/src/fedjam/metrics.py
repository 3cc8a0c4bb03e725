"""Evaluation: accuracy, loss, confusion matrices and their CSV/JSON forms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import FormatError, InputError
from .siggen import CLASS_NAMES

CURVE_HEADER = ("round", "accuracy", "loss", "wall_seconds")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total if self.total else 0.0

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recalls(self) -> np.ndarray:
        """Per-class recall; classes absent from the test split get 0."""
        rows = self.row_sums()
        diag = np.diag(self.counts).astype(np.float64)
        return np.divide(diag, rows, out=np.zeros(self.num_classes), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def predict_labels(proba) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(proba, axis=1)


def evaluate(params: dict, x, y, cfg: nn.CnnConfig):
    """Return ``(accuracy, mean cross-entropy, ConfusionMatrix)`` on a test set."""
    y = np.asarray(y)
    if len(y) == 0:
        raise InputError("cannot evaluate on an empty test set")
    proba = nn.predict_proba(params, x, cfg)
    logp = np.log(np.maximum(proba.astype(np.float64), np.finfo(np.float64).tiny))
    loss = float(-logp[np.arange(len(y)), y.astype(np.intp)].mean())
    cm = ConfusionMatrix.from_labels(y, predict_labels(proba), cfg.num_classes)
    return cm.accuracy, loss, cm


def _g6(value) -> str:
    return f"{value:.6g}"


def write_curves(records, path) -> None:
    """CSV ``round,accuracy,loss,wall_seconds``; 6 significant digits, LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for r in records:
            writer.writerow([r.round, _g6(r.accuracy), _g6(r.loss), _g6(r.wall_seconds)])


def read_curves(path) -> list:
    from .fed import RoundRecord

    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise FormatError(f"{path}: not a learning-curve CSV", offset=0)
    try:
        return [RoundRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed learning-curve row: {exc}") from None


def write_confusion(cm: ConfusionMatrix, path, class_names=None) -> None:
    """Counts per true class, then its recall and an ``empty`` flag (1 = no test samples)."""
    names = list(class_names or CLASS_NAMES[: cm.num_classes])
    rows = cm.row_sums()
    recalls = cm.recalls()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", *names, "recall", "empty"])
        for i, name in enumerate(names):
            writer.writerow([name, *map(int, cm.counts[i]), _g6(recalls[i]), int(rows[i] == 0)])


def read_confusion(path):
    """Return ``(ConfusionMatrix, class names, recalls, empty flags)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0] if rows else []
    if len(header) < 3 or header[0] != "class" or header[-2:] != ["recall", "empty"]:
        raise FormatError(f"{path}: not a confusion-matrix CSV", offset=0)
    names = header[1:-2]
    try:
        counts = np.array([[int(v) for v in r[1 : 1 + len(names)]] for r in rows[1:]], dtype=np.int64)
        recalls = np.array([float(r[-2]) for r in rows[1:]])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed confusion row: {exc}") from None
    if counts.shape != (len(names), len(names)):
        raise FormatError(f"{path}: expected {len(names)} rows of {len(names)} counts")
    empty = np.array([r[-1] == "1" for r in rows[1:]])
    return ConfusionMatrix(counts), names, recalls, empty


def run_summary(setting: str, num_clients: int, rounds: int, cm: ConfusionMatrix, beta=None) -> dict:
    out = {"setting": setting, "M": num_clients}
    if beta is not None:
        out["beta"] = beta
    out.update(rounds=rounds, final_accuracy=cm.accuracy, per_class_recall=[float(r) for r in cm.recalls()])
    return out


def write_summary(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
