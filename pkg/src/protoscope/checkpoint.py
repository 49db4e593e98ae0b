"""PCKP checkpoint container: trainable tensors plus JSON run metadata.

Layout (little-endian): magic "PCKP", version byte 0x01, three zero bytes,
u32 tensor count, then per tensor a u16 name length, UTF-8 name, u8 rank,
rank x u32 dims, and a binary32 payload; finally u32 metadata length and
UTF-8 JSON metadata. Tensors are written in the model's fixed order, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .embedstore import LabelSpace, Normalizer
from .errors import CorruptionError, FormatError, ValidationError
from .protonet import (
    Adaptor,
    LinearHead,
    PrototypeBank,
    PrototypeModel,
    adaptor_param_names,
)
from .trainer import Checkpoint, config_from_dict, config_to_dict

PCKP_MAGIC = b"PCKP"
PCKP_VERSION = 1


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    tensors = checkpoint.model.trainable_tensors()
    parts = [PCKP_MAGIC, bytes([PCKP_VERSION, 0, 0, 0]), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    metadata = {
        "config": config_to_dict(checkpoint.config),
        "label_space": list(checkpoint.model.label_space.classes),
        "normalizer": {
            "mean": checkpoint.model.normalizer.mean.tolist(),
            "std": checkpoint.model.normalizer.std.tolist(),
        },
        "step": checkpoint.step,
        "validation_loss": checkpoint.validation_loss,
    }
    blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.offset = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CorruptionError(f"{self.label}: truncated at offset {self.offset}")
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != PCKP_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, p0, p1, p2 = reader.unpack("<4B")
    if version != PCKP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if (p0, p1, p2) != (0, 0, 0):
        raise FormatError(f"{path}: nonzero header padding")
    (n_tensors,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(count * 4)
        if name in tensors:
            raise ValidationError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        )
    (meta_len,) = reader.unpack("<I")
    blob = reader.take(meta_len)
    if reader.offset != len(reader.data):
        raise CorruptionError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    try:
        metadata = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: bad metadata JSON: {exc}") from None
    return _assemble(str(path), tensors, metadata)


def _assemble(label: str, tensors: dict[str, np.ndarray], metadata: dict) -> Checkpoint:
    for key in ("config", "label_space", "normalizer", "step", "validation_loss"):
        if key not in metadata:
            raise ValidationError(f"{label}: metadata missing {key!r}")
    config = config_from_dict(metadata["config"])
    label_space = LabelSpace(tuple(metadata["label_space"]))
    norm = Normalizer(
        mean=np.asarray(metadata["normalizer"]["mean"], dtype=np.float64),
        std=np.asarray(metadata["normalizer"]["std"], dtype=np.float64),
    )

    expected = ["prototypes"]
    expected += [f"adaptor.{n}" for n in adaptor_param_names(config.adaptor)]
    expected += ["head.weight", "head.bias"]
    if list(tensors.keys()) != expected:
        raise ValidationError(
            f"{label}: tensor set {list(tensors)} does not match config "
            f"(expected {expected})"
        )

    protos = tensors["prototypes"]
    if protos.ndim != 2:
        raise ValidationError(f"{label}: prototypes must be rank 2")
    m, dim = protos.shape
    c = label_space.n_classes
    if m != c * config.prototypes_per_class:
        raise ValidationError(
            f"{label}: {m} prototypes inconsistent with {c} classes x "
            f"{config.prototypes_per_class} per class"
        )
    if norm.mean.shape != (dim,) or norm.std.shape != (dim,):
        raise ValidationError(f"{label}: normalizer length does not match dim {dim}")
    if tensors["head.weight"].shape != (c, m) or tensors["head.bias"].shape != (c,):
        raise ValidationError(f"{label}: head shape mismatch")
    for name in adaptor_param_names(config.adaptor):
        want = (dim,) if name.startswith("b") else (dim, dim)
        if tensors[f"adaptor.{name}"].shape != want:
            raise ValidationError(f"{label}: adaptor.{name} shape mismatch")

    bank = PrototypeBank(
        vectors=protos,
        class_of=np.repeat(np.arange(c, dtype=np.int64), config.prototypes_per_class),
    )
    adaptor = Adaptor(
        config.adaptor,
        {n: tensors[f"adaptor.{n}"] for n in adaptor_param_names(config.adaptor)},
    )
    head = LinearHead(weight=tensors["head.weight"], bias=tensors["head.bias"])
    model = PrototypeModel(
        label_space=label_space, normalizer=norm, bank=bank, adaptor=adaptor, head=head
    )
    return Checkpoint(
        model=model,
        config=config,
        step=int(metadata["step"]),
        validation_loss=float(metadata["validation_loss"]),
    )
