"""Interpretability surface: prototype attribution, nearest-sample lookup,
prototype export for external sonification, and the self-classification audit.

Attribution works on segment-averaged similarities; because the head is
linear, summing all prototype contributions plus the class bias reproduces
the track's averaged logit exactly (up to float rounding).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import (
    Dataset,
    EmbeddingRecord,
    split_rows,
    write_embedding_file,
)
from .errors import ValidationError
from .protonet import PrototypeModel, adapt_prototypes, forward, pairwise_sqdist


@dataclass
class PrototypeContribution:
    prototype: int
    label: str
    similarity: float  # segment-averaged S
    weight: float  # head weight toward the explained class
    contribution: float  # similarity * weight


@dataclass
class Explanation:
    track_id: str
    predicted_label: str
    predicted_index: int
    averaged_logits: list[float]
    bias: float  # head bias of the predicted class
    top: list[PrototypeContribution]  # sorted by contribution descending
    top_k: int


def explain_prediction(
    model: PrototypeModel, record: EmbeddingRecord, top_k: int
) -> Explanation:
    """Rank prototypes by their contribution to the predicted-class logit."""
    m = model.bank.n_prototypes
    if not 1 <= top_k <= m:
        raise ValidationError(f"top_k must be in [1, {m}], got {top_k}")
    rows = model.normalizer.apply(record.segments)
    trace = forward(model, rows)
    avg_logits = trace.logits.mean(axis=0)
    avg_sim = trace.similarity.mean(axis=0)
    pred = int(np.argmax(avg_logits))
    weights = model.head.weight[pred]
    contributions = avg_sim * weights
    order = np.argsort(-contributions, kind="stable")[:top_k]
    top = [
        PrototypeContribution(
            prototype=int(j),
            label=model.label_space.classes[int(model.bank.class_of[j])],
            similarity=float(avg_sim[j]),
            weight=float(weights[j]),
            contribution=float(contributions[j]),
        )
        for j in order
    ]
    return Explanation(
        track_id=record.id,
        predicted_label=model.label_space.classes[pred],
        predicted_index=pred,
        averaged_logits=[float(v) for v in avg_logits],
        bias=float(model.head.bias[pred]),
        top=top,
        top_k=top_k,
    )


@dataclass
class NearestSample:
    track_id: str
    segment: int
    sqdist: float


@dataclass
class NearestSamples:
    prototype: int
    entries: list[NearestSample]  # ascending distance, ties by (id, segment)
    truncated: bool  # k exceeded the available segments


def nearest_samples(
    model: PrototypeModel,
    dataset: Dataset,
    prototype_index: int,
    k: int,
    same_class_only: bool = False,
) -> NearestSamples:
    """Exhaustive scan of the train split for the segments closest to one
    adapted prototype."""
    m = model.bank.n_prototypes
    if not 0 <= prototype_index < m:
        raise ValidationError(f"prototype index {prototype_index} outside [0, {m})")
    rows, labels, provenance = split_rows(
        dataset, model.normalizer, "train", model.label_space
    )
    if same_class_only:
        mask = labels == model.bank.class_of[prototype_index]
        rows = rows[mask]
        provenance = [p for p, keep in zip(provenance, mask) if keep]
    z_p = adapt_prototypes(model.bank, model.adaptor)
    dist = pairwise_sqdist(rows, z_p[prototype_index][None, :])[:, 0]
    order = sorted(range(len(dist)), key=lambda i: (dist[i], provenance[i]))
    truncated = k > len(order)
    entries = [
        NearestSample(track_id=provenance[i][0], segment=provenance[i][1], sqdist=float(dist[i]))
        for i in order[:k]
    ]
    return NearestSamples(prototype=prototype_index, entries=entries, truncated=truncated)


@dataclass
class SelfClassification:
    prototype: int
    label: str
    predicted_label: str
    correct: bool
    rival_label: str | None  # predicted class when wrong


@dataclass
class SelfClassificationReport:
    entries: list[SelfClassification]
    fraction_correct: float


def self_classify_prototypes(model: PrototypeModel) -> SelfClassificationReport:
    """Classify each adapted prototype as a single-segment input."""
    z_p = adapt_prototypes(model.bank, model.adaptor)
    trace = forward(model, z_p)
    predicted = trace.logits.argmax(axis=1)
    entries = []
    correct = 0
    for j in range(model.bank.n_prototypes):
        truth = int(model.bank.class_of[j])
        pred = int(predicted[j])
        ok = pred == truth
        correct += ok
        entries.append(
            SelfClassification(
                prototype=j,
                label=model.label_space.classes[truth],
                predicted_label=model.label_space.classes[pred],
                correct=ok,
                rival_label=None if ok else model.label_space.classes[pred],
            )
        )
    return SelfClassificationReport(
        entries=entries, fraction_correct=correct / model.bank.n_prototypes
    )


def export_prototypes(
    model: PrototypeModel,
    dataset: Dataset,
    out_dir: str | Path,
    checkpoint_hash: str | None = None,
    nearest_k: int = 3,
) -> dict:
    """Write de-normalized raw and adapted prototype vectors as PEMB files.

    The inverse z-score is applied so the exported vectors live in the
    encoder's native embedding space, ready for an external decoder. Returns
    the written JSON index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z_p = adapt_prototypes(model.bank, model.adaptor)
    raw_native = model.normalizer.invert(model.bank.vectors)
    adapted_native = model.normalizer.invert(z_p)
    width = max(3, len(str(model.bank.n_prototypes - 1)))
    index: dict = {
        "checkpoint_hash": checkpoint_hash,
        "n_prototypes": model.bank.n_prototypes,
        "classes": list(model.label_space.classes),
        "prototypes": [],
    }
    for j in range(model.bank.n_prototypes):
        raw_name = f"proto_{j:0{width}d}_raw.pemb"
        adapted_name = f"proto_{j:0{width}d}_adapted.pemb"
        write_embedding_file(out_dir / raw_name, raw_native[j][None, :].astype(np.float32))
        write_embedding_file(
            out_dir / adapted_name, adapted_native[j][None, :].astype(np.float32)
        )
        neighbors = nearest_samples(model, dataset, j, nearest_k)
        index["prototypes"].append(
            {
                "prototype": j,
                "class": model.label_space.classes[int(model.bank.class_of[j])],
                "raw_path": raw_name,
                "adapted_path": adapted_name,
                "nearest_train_samples": [
                    {"id": e.track_id, "segment": e.segment, "sqdist": e.sqdist}
                    for e in neighbors.entries
                ],
            }
        )
    (out_dir / "index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return index


def explanation_to_dict(explanation: Explanation) -> dict:
    return {
        "track_id": explanation.track_id,
        "predicted_label": explanation.predicted_label,
        "predicted_index": explanation.predicted_index,
        "averaged_logits": explanation.averaged_logits,
        "bias": explanation.bias,
        "top_k": explanation.top_k,
        "prototypes": [
            {
                "prototype": c.prototype,
                "class": c.label,
                "similarity": c.similarity,
                "weight": c.weight,
                "contribution": c.contribution,
            }
            for c in explanation.top
        ],
    }


def self_classification_to_dict(report: SelfClassificationReport) -> dict:
    return {
        "fraction_correct": report.fraction_correct,
        "misclassified": [
            {"prototype": e.prototype, "class": e.label, "rival": e.rival_label}
            for e in report.entries
            if not e.correct
        ],
        "entries": [
            {
                "prototype": e.prototype,
                "class": e.label,
                "predicted": e.predicted_label,
                "correct": e.correct,
            }
            for e in report.entries
        ],
    }
