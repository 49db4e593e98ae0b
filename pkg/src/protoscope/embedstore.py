"""Embedding dataset ingestion: PEMB container IO, manifests, z-score normalization.

A dataset is a JSON-Lines manifest pointing at one PEMB file per track. Each
PEMB file holds the track's ordered segment-embedding matrix (one row per
non-overlapping segment, binary32 on disk). Normalization statistics are
computed per dimension over the train split only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1
PEMB_HEADER_LEN = 16

SPLITS = ("train", "valid", "test")

# Floor for degenerate (zero-variance) dimensions so normalization stays total.
STD_FLOOR = 1e-8


def validate_segment_matrix(values: np.ndarray) -> np.ndarray:
    """Check shape and finiteness of a segment matrix, return it as float32."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"segment matrix must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    if n < 1 or d < 1:
        raise ValidationError(f"segment matrix must be at least 1x1, got {n}x{d}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError("segment matrix contains non-finite values")
    return arr


def read_embedding_file(path: str | Path) -> np.ndarray:
    """Read a PEMB file into an (n_segments, dim) float32 matrix."""
    data = Path(path).read_bytes()
    if len(data) < PEMB_HEADER_LEN:
        raise CorruptionError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != PEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if data[4] != PEMB_VERSION:
        raise FormatError(f"{path}: unsupported version {data[4]}")
    if data[5:8] != b"\x00\x00\x00":
        raise FormatError(f"{path}: nonzero header padding")
    n, d = struct.unpack_from("<II", data, 8)
    if n < 1 or d < 1:
        raise ValidationError(f"{path}: non-positive shape {n}x{d}")
    expected = PEMB_HEADER_LEN + n * d * 4
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: payload length {len(data) - PEMB_HEADER_LEN} does not match "
            f"header shape {n}x{d}"
        )
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=PEMB_HEADER_LEN)
    matrix = values.reshape(n, d).astype(np.float32, copy=True)
    if not np.isfinite(matrix).all():
        raise ValidationError(f"{path}: non-finite value in payload")
    return matrix


def write_embedding_file(path: str | Path, matrix: np.ndarray) -> None:
    """Write a segment matrix as a PEMB file (deterministic bytes)."""
    arr = validate_segment_matrix(matrix)
    n, d = arr.shape
    header = PEMB_MAGIC + bytes([PEMB_VERSION, 0, 0, 0]) + struct.pack("<II", n, d)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class vocabulary; ordering is fixed at load and persisted."""

    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.classes) < 2:
            raise ValidationError("label space needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("label space has duplicate classes")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ValidationError(f"unknown label {label!r}") from None


@dataclass
class EmbeddingRecord:
    """One track: id, label, split, and its segment-embedding matrix."""

    id: str
    label: str
    split: str
    segments: np.ndarray  # (n_segments, dim) float32


@dataclass
class Dataset:
    records: list[EmbeddingRecord]
    label_space: LabelSpace
    dim: int

    def split(self, name: str) -> list[EmbeddingRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a manifest and all referenced PEMB files.

    Labels are collected into a lexicographically sorted LabelSpace so class
    indices do not depend on manifest line order.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records: list[EmbeddingRecord] = []
    seen_ids: set[str] = set()
    dim: int | None = None

    with manifest_path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{manifest_path}:{lineno}: bad JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise ValidationError(f"{manifest_path}:{lineno}: line is not an object")
            missing = [k for k in ("id", "label", "split", "path") if k not in obj]
            if missing:
                raise ValidationError(f"{manifest_path}:{lineno}: missing keys {missing}")
            rec_id = str(obj["id"])
            if not rec_id:
                raise ValidationError(f"{manifest_path}:{lineno}: empty id")
            if rec_id in seen_ids:
                raise ValidationError(f"{manifest_path}:{lineno}: duplicate id {rec_id!r}")
            seen_ids.add(rec_id)
            split = obj["split"]
            if split not in SPLITS:
                raise ValidationError(f"{manifest_path}:{lineno}: unknown split {split!r}")
            segments = read_embedding_file(base / obj["path"])
            if dim is None:
                dim = segments.shape[1]
            elif segments.shape[1] != dim:
                raise ValidationError(
                    f"{manifest_path}:{lineno}: dim {segments.shape[1]} differs from "
                    f"dataset dim {dim}"
                )
            records.append(EmbeddingRecord(rec_id, str(obj["label"]), split, segments))

    if not records:
        raise ValidationError(f"{manifest_path}: empty manifest")
    for required in ("train", "valid"):
        if not any(r.split == required for r in records):
            raise ValidationError(f"{manifest_path}: {required} split is empty")
    label_space = LabelSpace(tuple(sorted({r.label for r in records})))
    assert dim is not None
    return Dataset(records=records, label_space=label_space, dim=dim)


@dataclass
class Normalizer:
    """Per-dimension z-score statistics fit on the train split."""

    mean: np.ndarray  # (dim,) float64
    std: np.ndarray  # (dim,) float64, floored at STD_FLOOR

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.mean.shape[0]:
            raise ValidationError(
                f"row length {rows.shape[-1]} does not match normalizer dim "
                f"{self.mean.shape[0]}"
            )
        return (rows - self.mean) / self.std

    def invert(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.mean.shape[0]:
            raise ValidationError(
                f"row length {rows.shape[-1]} does not match normalizer dim "
                f"{self.mean.shape[0]}"
            )
        return rows * self.std + self.mean


def fit_normalizer(dataset: Dataset) -> Normalizer:
    """Per-dimension mean and population std over all train-split segment rows.

    Accumulation runs in one pass over records sorted by id, so the result is
    independent of manifest order and of valid/test contents.
    """
    train = sorted(dataset.split("train"), key=lambda r: r.id)
    if not train:
        raise ValidationError("cannot fit normalizer: train split is empty")
    total = np.zeros(dataset.dim, dtype=np.float64)
    total_sq = np.zeros(dataset.dim, dtype=np.float64)
    count = 0
    for rec in train:
        rows = rec.segments.astype(np.float64)
        total += rows.sum(axis=0)
        total_sq += (rows * rows).sum(axis=0)
        count += rows.shape[0]
    if count == 0:
        raise ValidationError("cannot fit normalizer: zero train rows")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return Normalizer(mean=mean, std=std)


def apply_normalizer(norm: Normalizer, row: np.ndarray) -> np.ndarray:
    """Z-score one row (or a stack of rows) with the fitted statistics."""
    return norm.apply(row)


def split_rows(
    dataset: Dataset, norm: Normalizer, split: str, label_space: LabelSpace | None = None
) -> tuple[np.ndarray, np.ndarray, list[tuple[str, int]]]:
    """Stack one split's normalized segment rows.

    Records are taken in id order so downstream seeded procedures depend only
    on the split's contents. Returns (rows, class indices, (track id, segment
    index) provenance per row).
    """
    space = label_space if label_space is not None else dataset.label_space
    records = sorted(dataset.split(split), key=lambda r: r.id)
    if not records:
        raise ValidationError(f"split {split!r} is empty")
    blocks = []
    labels = []
    provenance: list[tuple[str, int]] = []
    for rec in records:
        blocks.append(norm.apply(rec.segments))
        idx = space.index_of(rec.label)
        labels.extend([idx] * rec.segments.shape[0])
        provenance.extend((rec.id, s) for s in range(rec.segments.shape[0]))
    rows = np.concatenate(blocks, axis=0)
    return rows, np.asarray(labels, dtype=np.int64), provenance
