"""Prototype initialization: per-class k-means over normalized train embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedstore import Dataset, Normalizer, split_rows
from .errors import ValidationError
from .protonet import PrototypeBank, make_bank, pairwise_sqdist

N_RESTARTS = 8
MAX_ITER = 200
REL_TOL = 1e-6


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, D)
    assignment: np.ndarray  # (n,) centroid index per point
    inertia: float
    inertia_history: list[float]  # per-iteration, non-increasing


def _plusplus_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws after a uniform first pick."""
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(0, n)
    dist = pairwise_sqdist(points, points[chosen[0]][None, :])[:, 0]
    for j in range(1, k):
        total = dist.sum()
        if total > 0.0:
            idx = rng.choice(n, p=dist / total)
        else:
            # all remaining distances zero (duplicate points): uniform pick
            idx = rng.integers(0, n)
        chosen[j] = idx
        dist = np.minimum(dist, pairwise_sqdist(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def _lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
) -> KMeansResult:
    k = centroids.shape[0]
    history: list[float] = []
    prev_inertia = np.inf
    assignment = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        dist = pairwise_sqdist(points, centroids)
        assignment = dist.argmin(axis=1)

        # Empty-cluster repair: move the point farthest from its centroid
        # (among clusters keeping >= 2 members) into each empty cluster.
        counts = np.bincount(assignment, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            point_dist = dist[np.arange(points.shape[0]), assignment]
            donors = counts[assignment] >= 2
            candidates = np.where(donors, point_dist, -np.inf)
            moved = int(candidates.argmax())
            counts[assignment[moved]] -= 1
            assignment[moved] = empty
            counts[empty] = 1
            centroids = centroids.copy()
            centroids[empty] = points[moved]
            dist[:, empty] = pairwise_sqdist(points, points[moved][None, :])[:, 0]

        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[assignment == j].mean(axis=0)
        inertia = float(
            pairwise_sqdist(points, new_centroids)[
                np.arange(points.shape[0]), assignment
            ].sum()
        )
        history.append(inertia)
        centroids = new_centroids
        if inertia == 0.0 or prev_inertia - inertia < tol * max(prev_inertia, 1e-300):
            prev_inertia = inertia
            break
        prev_inertia = inertia
    return KMeansResult(
        centroids=centroids,
        assignment=assignment,
        inertia=history[-1],
        inertia_history=history,
    )


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = MAX_ITER,
    tol: float = REL_TOL,
    n_restarts: int = N_RESTARTS,
) -> KMeansResult:
    """Lloyd's algorithm with seeded k-means++ restarts, keeping lowest inertia."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be 2-D")
    if not np.isfinite(points).all():
        raise ValidationError("points contain non-finite values")
    n = points.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValidationError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_restarts):
        seeds = _plusplus_seeds(points, k, rng)
        result = _lloyd(points, seeds, max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    assert best is not None
    return best


def init_prototypes(
    dataset: Dataset,
    norm: Normalizer,
    prototypes_per_class: int,
    seed: int,
) -> PrototypeBank:
    """Per-class k-means over normalized train segments, concatenated class-major.

    Each class runs an independent k-means seeded with seed + class_index. A
    class with fewer train rows than prototypes_per_class is a configuration
    error and fails loudly.
    """
    if prototypes_per_class < 1:
        raise ValidationError("prototypes_per_class must be >= 1")
    rows, labels, _ = split_rows(dataset, norm, "train")
    blocks = []
    for c in range(dataset.label_space.n_classes):
        class_rows = rows[labels == c]
        if class_rows.shape[0] == 0:
            raise ValidationError(
                f"class {dataset.label_space.classes[c]!r} has no train rows"
            )
        if class_rows.shape[0] < prototypes_per_class:
            raise ValidationError(
                f"class {dataset.label_space.classes[c]!r} has "
                f"{class_rows.shape[0]} train rows, fewer than "
                f"{prototypes_per_class} prototypes"
            )
        result = kmeans(class_rows, prototypes_per_class, seed=seed + c)
        blocks.append(result.centroids)
    return make_bank(blocks)
