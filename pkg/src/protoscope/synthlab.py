"""Synthetic blob datasets and independent oracles for tests and self-checks.

Blobs stand in for encoder embeddings: per class one uniform center, per
track gaussian segments around it. The oracles are a central finite-difference
gradient and an exhaustive-partition k-means optimum; both are deliberately
independent of the implementations they check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .protonet import (
    Adaptor,
    LinearHead,
    PrototypeBank,
    PrototypeModel,
    adaptor_param_names,
    forward,
)
from .embedstore import LabelSpace, Normalizer, write_embedding_file
from .initkit import kmeans
from .trainer import backward, loss_classification, loss_prototype, loss_total


@dataclass
class BlobSpec:
    n_classes: int = 4
    per_class: int = 100  # tracks per class
    dim: int = 16
    center_scale: float = 10.0
    noise_std: float = 1.0
    segments_per_track: int = 4
    seed: int = 0

    @property
    def separation_ratio(self) -> float:
        return self.center_scale / self.noise_std


def gen_blobs(spec: BlobSpec, out_dir: str | Path) -> Path:
    """Write a blob dataset (manifest + PEMB files), returning the manifest path.

    Tracks split 80/10/10 into train/valid/test per class, by track order.
    The full spec, including the separation ratio, lands in blobspec.json
    next to the manifest.
    """
    if spec.n_classes < 2 or spec.per_class < 3 or spec.dim < 1:
        raise ValidationError("blob spec needs >= 2 classes, >= 3 tracks/class, dim >= 1")
    if spec.segments_per_track < 1 or spec.noise_std < 0:
        raise ValidationError("bad segments_per_track or noise_std")
    out_dir = Path(out_dir)
    emb_dir = out_dir / "emb"
    emb_dir.mkdir(parents=True, exist_ok=True)

    n_train = max(1, int(spec.per_class * 0.8))
    n_valid = max(1, int(spec.per_class * 0.1))
    if n_train + n_valid >= spec.per_class:
        raise ValidationError("per_class too small for an 80/10/10 split")

    rng = np.random.default_rng(spec.seed)
    width = len(str(spec.n_classes - 1))
    track_width = len(str(spec.per_class - 1))
    lines = []
    for c in range(spec.n_classes):
        label = f"class_{c:0{width}d}"
        center = rng.uniform(-spec.center_scale, spec.center_scale, size=spec.dim)
        for t in range(spec.per_class):
            segments = center + rng.normal(
                0.0, spec.noise_std, size=(spec.segments_per_track, spec.dim)
            )
            track_id = f"{label}_track_{t:0{track_width}d}"
            rel_path = f"emb/{track_id}.pemb"
            write_embedding_file(out_dir / rel_path, segments.astype(np.float32))
            split = "train" if t < n_train else "valid" if t < n_train + n_valid else "test"
            lines.append(
                json.dumps(
                    {"id": track_id, "label": label, "split": split, "path": rel_path},
                    sort_keys=True,
                )
            )
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    blob_meta = asdict(spec)
    blob_meta["separation_ratio"] = spec.separation_ratio
    (out_dir / "blobspec.json").write_text(
        json.dumps(blob_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def finite_diff_grad(loss_fn, params: dict[str, np.ndarray], h: float = 1e-3):
    """Central-difference gradients of a scalar loss over named tensors.

    Perturbs each coordinate of the given arrays in place (and restores it),
    so loss_fn may either read the dict or close over the same arrays.
    """
    grads = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=np.float64)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + h
            up = loss_fn(params)
            value[idx] = original - h
            down = loss_fn(params)
            value[idx] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValidationError(f"non-finite loss while probing {name}{idx}")
            grad[idx] = (up - down) / (2.0 * h)
        grads[name] = grad
    return grads


def brute_force_kmeans(points: np.ndarray, k: int) -> tuple[float, list[list[int]]]:
    """Globally optimal k-means by enumerating partitions into <= k parts.

    Refuses more than 10 points; enumeration is exponential.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n > 10:
        raise ValidationError(f"brute force bound is 10 points, got {n}")
    if k < 1:
        raise ValidationError("k must be >= 1")
    best_inertia = np.inf
    best_parts: list[list[int]] = []

    def inertia_of(parts: list[list[int]]) -> float:
        total = 0.0
        for part in parts:
            block = points[part]
            total += float(np.square(block - block.mean(axis=0)).sum())
        return total

    def recurse(i: int, parts: list[list[int]]) -> None:
        nonlocal best_inertia, best_parts
        if i == n:
            inertia = inertia_of(parts)
            if inertia < best_inertia:
                best_inertia = inertia
                best_parts = [list(p) for p in parts]
            return
        for part in parts:
            part.append(i)
            recurse(i + 1, parts)
            part.pop()
        if len(parts) < k:
            parts.append([i])
            recurse(i + 1, parts)
            parts.pop()

    recurse(0, [])
    return best_inertia, best_parts


# --------------------------------------------------------------------------
# Oracle suites shared by the test suite and the CLI self-check.
# --------------------------------------------------------------------------

GRAD_ABS_FLOOR = 1e-8
GRAD_ABS_TOL = 1e-7
GRAD_REL_TOL = 1e-4


def random_check_model(rng: np.random.Generator) -> tuple[PrototypeModel, np.ndarray, np.ndarray, float]:
    """One random small configuration for gradient checking.

    Covers all adaptor variants and lambda in {0, 0.25, 1}; all adaptor
    tensors are randomized (not the training initialization) so every
    backward path carries signal.
    """
    c = int(rng.integers(2, 5))
    per_class = int(rng.integers(1, max(2, 6 // c + 1)))
    m = c * per_class
    d = int(rng.integers(2, 9))
    n = int(rng.integers(1, 17))
    variant = ("identity", "residual_mlp", "set_attention")[int(rng.integers(0, 3))]
    lam = (0.0, 0.25, 1.0)[int(rng.integers(0, 3))]

    def tensor(*shape):
        return 0.5 * rng.standard_normal(shape)

    bank = PrototypeBank(
        vectors=tensor(m, d),
        class_of=np.repeat(np.arange(c, dtype=np.int64), per_class),
    )
    adaptor = Adaptor(
        variant,
        {
            name: tensor(d) if name.startswith("b") else tensor(d, d)
            for name in adaptor_param_names(variant)
        },
    )
    head = LinearHead(weight=tensor(c, m), bias=tensor(c))
    space = LabelSpace(tuple(f"c{i}" for i in range(c)))
    norm = Normalizer(mean=np.zeros(d), std=np.ones(d))
    model = PrototypeModel(
        label_space=space, normalizer=norm, bank=bank, adaptor=adaptor, head=head
    )
    x = 0.5 * rng.standard_normal((n, d))
    labels = rng.integers(0, c, size=n)
    return model, x, labels, lam


def _loss_for_params(model: PrototypeModel, x, targets, labels, lam) -> float:
    trace = forward(model, x)
    l_c = loss_classification(trace.logits, targets)
    l_p, _ = loss_prototype(trace, labels, model.bank.class_of)
    return loss_total(l_c, l_p, lam)


@dataclass
class GradCheckCase:
    index: int
    variant: str
    lam: float
    max_rel_err: float
    max_abs_err: float
    passed: bool


def gradient_check_suite(n_configs: int = 100, seed: int = 2024, h: float = 1e-3):
    """Analytic backward vs central finite differences on random configs."""
    rng = np.random.default_rng(seed)
    cases: list[GradCheckCase] = []
    for index in range(n_configs):
        model, x, labels, lam = random_check_model(rng)
        targets = np.zeros((x.shape[0], model.label_space.n_classes))
        targets[np.arange(x.shape[0]), labels] = 1.0

        trace = forward(model, x)
        analytic = backward(model, trace, targets, lam)

        params = model.trainable_tensors()

        def loss_fn(_params, _model=model, _x=x, _t=targets, _l=labels, _lam=lam):
            return _loss_for_params(_model, _x, _t, _l, _lam)

        numeric = finite_diff_grad(loss_fn, params, h=h)

        max_rel = 0.0
        max_abs = 0.0
        ok = True
        for name in params:
            a = analytic[name].reshape(-1)
            f = numeric[name].reshape(-1)
            small = np.abs(a) < GRAD_ABS_FLOOR
            abs_err = np.abs(a - f)
            if small.any():
                worst_abs = float(abs_err[small].max())
                max_abs = max(max_abs, worst_abs)
                ok = ok and worst_abs <= GRAD_ABS_TOL
            if (~small).any():
                rel = float((abs_err[~small] / np.abs(a[~small])).max())
                max_rel = max(max_rel, rel)
                ok = ok and rel <= GRAD_REL_TOL
        cases.append(
            GradCheckCase(
                index=index,
                variant=model.adaptor.variant,
                lam=lam,
                max_rel_err=max_rel,
                max_abs_err=max_abs,
                passed=ok,
            )
        )
    return cases


@dataclass
class KMeansOracleCase:
    index: int
    n: int
    k: int
    dim: int
    lloyd_inertia: float
    optimal_inertia: float
    passed: bool


def kmeans_oracle_suite(n_instances: int = 50, seed: int = 7):
    """Lloyd-with-restarts inertia vs exhaustive optimum on tiny instances."""
    rng = np.random.default_rng(seed)
    cases: list[KMeansOracleCase] = []
    for index in range(n_instances):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        d = int(rng.integers(1, 4))
        points = rng.uniform(-1.0, 1.0, size=(n, d))
        result = kmeans(points, k, seed=int(rng.integers(0, 2**31)))
        optimal, _ = brute_force_kmeans(points, k)
        cases.append(
            KMeansOracleCase(
                index=index,
                n=n,
                k=k,
                dim=d,
                lloyd_inertia=result.inertia,
                optimal_inertia=optimal,
                passed=abs(result.inertia - optimal) <= 1e-9,
            )
        )
    return cases
