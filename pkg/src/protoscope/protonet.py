"""Model core: prototype bank, prototype adaptors, similarity layer, linear head.

The forward pass maps a batch of normalized segment embeddings z_x (N x D) to
class logits through S = exp(-squared-distance(z_x, z_p)), where z_p is the
adapted prototype matrix. All arithmetic is float64; trainable tensors are
kept on the float32 grid so checkpoints round-trip bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedstore import LabelSpace, Normalizer
from .errors import ValidationError

ADAPTOR_VARIANTS = ("identity", "residual_mlp", "set_attention")

# Chunk bound for the (N, M, D) distance tensor; chunked and unchunked paths
# produce bitwise-identical results because each entry reduces over its own
# contiguous length-D slice.
_SQDIST_CHUNK_ELEMS = 1 << 22


def f32_grid(arr: np.ndarray) -> np.ndarray:
    """Round float64 values to the nearest binary32 value, staying float64."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class PrototypeBank:
    """Trainable prototype matrix with a class-major prototype-to-class map."""

    vectors: np.ndarray  # (M, D) float64
    class_of: np.ndarray  # (M,) int64, class-major blocks of equal size

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ValidationError("prototype matrix must be 2-D")
        if self.class_of.shape != (self.vectors.shape[0],):
            raise ValidationError("class map length must equal prototype count")
        counts = np.bincount(self.class_of)
        if counts.min() < 1 or counts.max() != counts.min():
            raise ValidationError("every class needs the same nonzero prototype count")
        expected = np.repeat(np.arange(len(counts)), counts[0])
        if not np.array_equal(self.class_of, expected):
            raise ValidationError("prototypes must be ordered class-major")

    @property
    def n_prototypes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.class_of[-1]) + 1

    @property
    def per_class(self) -> int:
        return self.n_prototypes // self.n_classes


def make_bank(centroids_per_class: list[np.ndarray]) -> PrototypeBank:
    """Concatenate per-class centroid blocks into a class-major bank."""
    per_class = centroids_per_class[0].shape[0]
    for block in centroids_per_class:
        if block.shape[0] != per_class:
            raise ValidationError("per-class centroid counts differ")
    vectors = f32_grid(np.concatenate(centroids_per_class, axis=0))
    class_of = np.repeat(np.arange(len(centroids_per_class), dtype=np.int64), per_class)
    return PrototypeBank(vectors=vectors, class_of=class_of)


@dataclass
class Adaptor:
    """Optional trainable transform applied to prototypes before similarity.

    identity      no parameters, z_p = p
    residual_mlp  z_p = p + tanh(p @ w1 + b1) @ w2 + b2
    set_attention single-head scaled dot-product attention across prototype
                  rows with a residual add, followed by the residual_mlp block
    """

    variant: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant not in ADAPTOR_VARIANTS:
            raise ValidationError(f"unknown adaptor variant {self.variant!r}")
        expected = adaptor_param_names(self.variant)
        if tuple(self.params.keys()) != expected:
            raise ValidationError(
                f"adaptor {self.variant} expects params {expected}, "
                f"got {tuple(self.params.keys())}"
            )


def adaptor_param_names(variant: str) -> tuple[str, ...]:
    if variant == "identity":
        return ()
    if variant == "residual_mlp":
        return ("w1", "b1", "w2", "b2")
    if variant == "set_attention":
        return ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")
    raise ValidationError(f"unknown adaptor variant {variant!r}")


def init_adaptor(variant: str, dim: int, rng: np.random.Generator) -> Adaptor:
    """Seeded adaptor initialization.

    Square weights before the output projection draw uniform(-1/sqrt(D),
    +1/sqrt(D)); w2, b1, b2 start at zero so the residual MLP block is inert.
    Draw order is fixed: wq, wk, wv, wo, then w1.
    """
    bound = 1.0 / np.sqrt(dim)

    def uniform() -> np.ndarray:
        return f32_grid(rng.uniform(-bound, bound, size=(dim, dim)))

    if variant == "identity":
        return Adaptor("identity", {})
    if variant == "residual_mlp":
        params = {
            "w1": uniform(),
            "b1": np.zeros(dim, dtype=np.float64),
            "w2": np.zeros((dim, dim), dtype=np.float64),
            "b2": np.zeros(dim, dtype=np.float64),
        }
        return Adaptor("residual_mlp", params)
    if variant == "set_attention":
        params = {
            "wq": uniform(),
            "wk": uniform(),
            "wv": uniform(),
            "wo": uniform(),
            "w1": uniform(),
            "b1": np.zeros(dim, dtype=np.float64),
            "w2": np.zeros((dim, dim), dtype=np.float64),
            "b2": np.zeros(dim, dtype=np.float64),
        }
        return Adaptor("set_attention", params)
    raise ValidationError(f"unknown adaptor variant {variant!r}")


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _adapt_with_cache(
    bank: PrototypeBank, adaptor: Adaptor
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    p = bank.vectors
    if adaptor.variant == "identity":
        return p, {}
    q = adaptor.params
    if adaptor.variant == "residual_mlp":
        pre = p @ q["w1"] + q["b1"]
        hidden = np.tanh(pre)
        z_p = p + hidden @ q["w2"] + q["b2"]
        return z_p, {"mlp_in": p, "hidden": hidden}
    # set_attention
    scale = 1.0 / np.sqrt(p.shape[1])
    qm = p @ q["wq"]
    km = p @ q["wk"]
    vm = p @ q["wv"]
    attn = _row_softmax((qm @ km.T) * scale)
    mixed = attn @ vm
    h = p + mixed @ q["wo"]
    pre = h @ q["w1"] + q["b1"]
    hidden = np.tanh(pre)
    z_p = h + hidden @ q["w2"] + q["b2"]
    cache = {
        "q": qm,
        "k": km,
        "v": vm,
        "attn": attn,
        "mixed": mixed,
        "mlp_in": h,
        "hidden": hidden,
    }
    return z_p, cache


def adapt_prototypes(bank: PrototypeBank, adaptor: Adaptor) -> np.ndarray:
    """Apply the adaptor to the prototype bank, returning z_p (M x D)."""
    for name, value in adaptor.params.items():
        if not np.isfinite(value).all():
            raise ValidationError(f"adaptor parameter {name} is non-finite")
    z_p, _ = _adapt_with_cache(bank, adaptor)
    return z_p


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between row sets, (N x M).

    Each entry accumulates (a[n,d] - b[m,d])^2 over d in dimension order; no
    dot-product rearrangement, so results are bitwise reproducible.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"incompatible shapes {a.shape} and {b.shape}")
    n, d = a.shape
    m = b.shape[0]
    if n * m * d <= _SQDIST_CHUNK_ELEMS:
        diff = a[:, None, :] - b[None, :, :]
        return np.square(diff).sum(axis=2)
    out = np.empty((n, m), dtype=np.float64)
    for j in range(m):
        out[:, j] = np.square(a - b[j]).sum(axis=1)
    return out


def similarity(z_x: np.ndarray, z_p: np.ndarray) -> np.ndarray:
    """S[n, m] = exp(-||z_x[n] - z_p[m]||^2), entries in (0, 1]."""
    return np.exp(-pairwise_sqdist(z_x, z_p))


@dataclass
class LinearHead:
    """Maps similarities to class logits: logits = S @ W.T + b."""

    weight: np.ndarray  # (C, M) float64
    bias: np.ndarray  # (C,) float64


def init_linear_head(label_space: LabelSpace, bank: PrototypeBank) -> LinearHead:
    """0/1 class-assignment weights (1 where the prototype belongs to the class)."""
    if bank.n_classes != label_space.n_classes:
        raise ValidationError(
            f"bank has {bank.n_classes} classes, label space has "
            f"{label_space.n_classes}"
        )
    c, m = label_space.n_classes, bank.n_prototypes
    weight = np.zeros((c, m), dtype=np.float64)
    weight[bank.class_of, np.arange(m)] = 1.0
    return LinearHead(weight=weight, bias=np.zeros(c, dtype=np.float64))


@dataclass
class ForwardTrace:
    """Everything the forward pass produced, cached for exact backprop."""

    inputs: np.ndarray  # (N, D) normalized batch
    z_p: np.ndarray  # (M, D) adapted prototypes
    sqdist: np.ndarray  # (N, M)
    similarity: np.ndarray  # (N, M)
    logits: np.ndarray  # (N, C)
    adaptor_cache: dict[str, np.ndarray]


@dataclass
class PrototypeModel:
    """The trainable classifier head plus everything needed to run it."""

    label_space: LabelSpace
    normalizer: Normalizer
    bank: PrototypeBank
    adaptor: Adaptor
    head: LinearHead

    @property
    def dim(self) -> int:
        return self.bank.dim

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        """Named trainable tensors in the fixed serialization order."""
        tensors: dict[str, np.ndarray] = {"prototypes": self.bank.vectors}
        for name in adaptor_param_names(self.adaptor.variant):
            tensors[f"adaptor.{name}"] = self.adaptor.params[name]
        tensors["head.weight"] = self.head.weight
        tensors["head.bias"] = self.head.bias
        return tensors

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name == "prototypes":
            self.bank.vectors = value
        elif name.startswith("adaptor."):
            key = name.split(".", 1)[1]
            if key not in self.adaptor.params:
                raise ValidationError(f"unknown tensor {name!r}")
            self.adaptor.params[key] = value
        elif name == "head.weight":
            self.head.weight = value
        elif name == "head.bias":
            self.head.bias = value
        else:
            raise ValidationError(f"unknown tensor {name!r}")


def forward(model: PrototypeModel, batch: np.ndarray) -> ForwardTrace:
    """Pure forward pass over a normalized batch (N x D)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValidationError("batch must be 2-D (N x D)")
    if batch.shape[1] != model.dim:
        raise ValidationError(
            f"batch dim {batch.shape[1]} does not match model dim {model.dim}"
        )
    z_p, cache = _adapt_with_cache(model.bank, model.adaptor)
    sqdist = pairwise_sqdist(batch, z_p)
    sim = np.exp(-sqdist)
    logits = sim @ model.head.weight.T + model.head.bias
    return ForwardTrace(
        inputs=batch,
        z_p=z_p,
        sqdist=sqdist,
        similarity=sim,
        logits=logits,
        adaptor_cache=cache,
    )
