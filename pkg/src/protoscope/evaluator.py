"""Track-level inference and class-normalized accuracy reporting.

A track's logits are the arithmetic mean of its per-segment forward logits;
the prediction is the argmax (ties to the lowest class index). The headline
metric is macro recall over classes represented in the evaluated split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import Dataset, EmbeddingRecord
from .errors import ValidationError
from .protonet import PrototypeModel, forward


@dataclass
class TrackPrediction:
    id: str
    true_label: str
    predicted_label: str
    logits: list[float]


@dataclass
class EvalReport:
    confusion: np.ndarray  # (C, C) counts, rows = true class
    per_class_recall: np.ndarray  # (C,), 0.0 for unrepresented classes
    class_normalized_accuracy: float
    predictions: list[TrackPrediction]
    classes: tuple[str, ...]
    absent_classes: tuple[str, ...]  # excluded from the recall mean


def track_logits(model: PrototypeModel, record: EmbeddingRecord) -> np.ndarray:
    """Mean over segment rows of forward logits (C,)."""
    if record.segments.shape[0] < 1:
        raise ValidationError(f"track {record.id!r} has no segments")
    rows = model.normalizer.apply(record.segments)
    trace = forward(model, rows)
    return trace.logits.mean(axis=0)


def evaluate(model: PrototypeModel, dataset: Dataset, split: str) -> EvalReport:
    """Confusion, per-class recall, and macro recall over one split."""
    records = sorted(dataset.split(split), key=lambda r: r.id)
    if not records:
        raise ValidationError(f"split {split!r} is empty")
    classes = model.label_space.classes
    c = len(classes)
    confusion = np.zeros((c, c), dtype=np.int64)
    predictions: list[TrackPrediction] = []
    for rec in records:
        logits = track_logits(model, rec)
        pred = int(np.argmax(logits))
        true = model.label_space.index_of(rec.label)
        confusion[true, pred] += 1
        predictions.append(
            TrackPrediction(
                id=rec.id,
                true_label=rec.label,
                predicted_label=classes[pred],
                logits=[float(v) for v in logits],
            )
        )
    counts = confusion.sum(axis=1)
    recall = np.zeros(c, dtype=np.float64)
    represented = counts > 0
    recall[represented] = confusion.diagonal()[represented] / counts[represented]
    accuracy = float(recall[represented].mean())
    return EvalReport(
        confusion=confusion,
        per_class_recall=recall,
        class_normalized_accuracy=accuracy,
        predictions=predictions,
        classes=classes,
        absent_classes=tuple(
            name for name, present in zip(classes, represented) if not present
        ),
    )


def report_to_dict(report: EvalReport) -> dict:
    return {
        "classes": list(report.classes),
        "class_normalized_accuracy": report.class_normalized_accuracy,
        "per_class_recall": [float(v) for v in report.per_class_recall],
        "absent_classes": list(report.absent_classes),
        "confusion": report.confusion.tolist(),
        "n_tracks": int(report.confusion.sum()),
    }


def write_report_json(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def write_confusion_csv(path: str | Path, report: EvalReport) -> None:
    lines = ["true\\predicted," + ",".join(report.classes)]
    for name, row in zip(report.classes, report.confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_predictions_csv(path: str | Path, report: EvalReport) -> None:
    header = "id,true,predicted," + ",".join(f"logit_{c}" for c in report.classes)
    lines = [header]
    for p in report.predictions:
        values = ",".join(repr(v) for v in p.logits)
        lines.append(f"{p.id},{p.true_label},{p.predicted_label},{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
