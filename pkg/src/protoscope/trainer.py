"""Joint training of prototypes, adaptor, and linear head.

Loss is lambda * L_c + (1 - lambda) * L_p, where L_c is mean one-vs-rest
binary cross-entropy over logits and L_p pulls each prototype toward its
closest same-class sample in the batch. Gradients are exact reverse-mode
derivatives; the optimizer is Adam with decoupled weight decay under a
one-cycle learning-rate schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .embedstore import Dataset, fit_normalizer, split_rows
from .errors import ValidationError
from .initkit import init_prototypes
from .protonet import (
    Adaptor,
    ForwardTrace,
    PrototypeModel,
    f32_grid,
    forward,
    init_adaptor,
    init_linear_head,
    pairwise_sqdist,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ONECYCLE_WARMUP_FRAC = 0.3
ONECYCLE_DIV = 25.0
ONECYCLE_FINAL_DIV = 1e4


@dataclass
class TrainConfig:
    lam: float = 0.25
    batch_size: int = 256
    total_steps: int = 150_000
    peak_lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    validate_every: int = 500
    adaptor: str = "set_attention"
    prototypes_per_class: int = 5
    # Eq-1 distances use adapted prototypes by default; this flag switches the
    # prototype loss to raw prototype vectors for experimentation.
    prototype_loss_on_raw: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")
        for name in ("batch_size", "total_steps", "validate_every", "prototypes_per_class"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.peak_lr <= 0.0:
            raise ValidationError("peak_lr must be positive")
        if self.weight_decay < 0.0:
            raise ValidationError("weight_decay must be nonnegative")


@dataclass
class LossReport:
    l_c: float
    l_p: float
    total: float
    lam: float
    covered_prototypes: int


def loss_classification(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-entry binary cross-entropy with logits (one-vs-rest).

    Uses the stable form max(x, 0) - x*y + log(1 + exp(-|x|)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValidationError(f"shape mismatch {logits.shape} vs {targets.shape}")
    onehot = np.isin(targets, (0.0, 1.0)).all() and np.all(targets.sum(axis=1) == 1.0)
    if not onehot:
        raise ValidationError("targets must be one-hot rows")
    per_entry = (
        np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    )
    return float(per_entry.mean())


def loss_prototype(
    trace: ForwardTrace,
    labels: np.ndarray,
    class_of: np.ndarray,
    sqdist: np.ndarray | None = None,
) -> tuple[float, int]:
    """Mean over covered prototypes of min same-class squared distance.

    A prototype is covered when its class has at least one sample in the
    batch; uncovered prototypes contribute no term and do not enter the
    denominator. Pass sqdist to score raw prototypes instead of adapted ones.
    """
    dist = trace.sqdist if sqdist is None else sqdist
    labels = np.asarray(labels)
    terms = []
    for j, cls in enumerate(class_of):
        mask = labels == cls
        if mask.any():
            terms.append(dist[mask, j].min())
    if not terms:
        return 0.0, 0
    return float(np.sum(terms) / len(terms)), len(terms)


def loss_total(l_c: float, l_p: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must be in [0, 1], got {lam}")
    return lam * l_c + (1.0 - lam) * l_p


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _adaptor_backward(
    model: PrototypeModel, trace: ForwardTrace, g_zp: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Propagate dL/dz_p through the adaptor; returns (dL/dp, adaptor grads)."""
    variant = model.adaptor.variant
    p = model.bank.vectors
    if variant == "identity":
        return g_zp.copy(), {}

    params = model.adaptor.params
    cache = trace.adaptor_cache
    hidden = cache["hidden"]
    mlp_in = cache["mlp_in"]

    # Residual MLP block: out = h + tanh(h @ w1 + b1) @ w2 + b2
    g_hidden = g_zp @ params["w2"].T
    g_pre = g_hidden * (1.0 - hidden * hidden)
    grads = {
        "w1": mlp_in.T @ g_pre,
        "b1": g_pre.sum(axis=0),
        "w2": hidden.T @ g_zp,
        "b2": g_zp.sum(axis=0),
    }
    g_h = g_zp + g_pre @ params["w1"].T

    if variant == "residual_mlp":
        return g_h, grads

    # Attention block: h = p + (softmax(q k^T / sqrt(D)) v) @ wo
    qm, km, vm = cache["q"], cache["k"], cache["v"]
    attn, mixed = cache["attn"], cache["mixed"]
    scale = 1.0 / np.sqrt(p.shape[1])

    grads["wo"] = mixed.T @ g_h
    g_mixed = g_h @ params["wo"].T
    g_attn = g_mixed @ vm.T
    g_v = attn.T @ g_mixed
    # softmax backward per row: dZ = A * (dA - sum(dA * A))
    g_scores = attn * (g_attn - (g_attn * attn).sum(axis=1, keepdims=True))
    g_q = (g_scores @ km) * scale
    g_k = (g_scores.T @ qm) * scale
    grads["wq"] = p.T @ g_q
    grads["wk"] = p.T @ g_k
    grads["wv"] = p.T @ g_v
    g_p = g_h + g_q @ params["wq"].T + g_k @ params["wk"].T + g_v @ params["wv"].T
    return g_p, grads


def backward(
    model: PrototypeModel,
    trace: ForwardTrace,
    targets: np.ndarray,
    lam: float,
    prototype_loss_on_raw: bool = False,
) -> dict[str, np.ndarray]:
    """Exact gradients of the total loss for every trainable tensor.

    The Eq-1 min routes gradient only to the argmin same-class sample per
    prototype; ties break toward the lowest sample index (argmin order).
    """
    x = trace.inputs
    s = trace.similarity
    z_p = trace.z_p
    n, c = trace.logits.shape
    targets = np.asarray(targets, dtype=np.float64)
    labels = targets.argmax(axis=1)
    class_of = model.bank.class_of

    # Classification path: dL_c/dlogits = (sigmoid - y) / (N * C)
    g_logits = lam * (_sigmoid(trace.logits) - targets) / (n * c)
    g_weight = g_logits.T @ s
    g_bias = g_logits.sum(axis=0)
    g_s = g_logits @ model.head.weight
    # S = exp(-sqdist): dL/dsqdist = -g_s * S
    g_sq = -(g_s * s)
    g_zp = -2.0 * (g_sq.T @ x - g_sq.sum(axis=0)[:, None] * z_p)

    # Prototype-pull path through the covered-prototype mean of min distances.
    proto_target = model.bank.vectors if prototype_loss_on_raw else z_p
    dist = (
        pairwise_sqdist(x, model.bank.vectors) if prototype_loss_on_raw else trace.sqdist
    )
    covered = [
        (j, int(np.flatnonzero(labels == cls)[dist[labels == cls, j].argmin()]))
        for j, cls in enumerate(class_of)
        if (labels == cls).any()
    ]
    g_proto_pull = np.zeros_like(proto_target)
    if covered:
        coeff = (1.0 - lam) * 2.0 / len(covered)
        for j, i_star in covered:
            g_proto_pull[j] = coeff * (proto_target[j] - x[i_star])

    if prototype_loss_on_raw:
        g_p, adaptor_grads = _adaptor_backward(model, trace, g_zp)
        g_p = g_p + g_proto_pull
    else:
        g_p, adaptor_grads = _adaptor_backward(model, trace, g_zp + g_proto_pull)

    grads: dict[str, np.ndarray] = {"prototypes": g_p}
    for name, value in adaptor_grads.items():
        grads[f"adaptor.{name}"] = value
    grads["head.weight"] = g_weight
    grads["head.bias"] = g_bias
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
) -> None:
    """One Adam update in place, with decoupled weight decay applied first."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, param in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise ValidationError(f"non-finite gradient for {name} at step {t}")
        if weight_decay != 0.0:
            param *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def onecycle_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """Cosine warmup to a single peak at 30% of the run, cosine anneal after.

    Starts at peak/25, ends at (peak/25)/1e4 on the final step; the peak value
    is attained exactly once at the phase boundary.
    """
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    initial = peak_lr / ONECYCLE_DIV
    final = initial / ONECYCLE_FINAL_DIV
    boundary = int(total_steps * ONECYCLE_WARMUP_FRAC)
    if step == boundary:
        return peak_lr
    if step < boundary:
        frac = step / boundary
        return initial + (peak_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * frac))
    span = total_steps - 1 - boundary
    if span <= 0 or step == total_steps - 1:
        return final
    frac = (step - boundary) / span
    return final + (peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class MetricsRow:
    step: int
    lr: float
    l_c: float
    l_p: float
    total: float
    val_total: float | None = None


@dataclass
class Checkpoint:
    """Best-validation snapshot of the model plus run metadata."""

    model: PrototypeModel
    config: TrainConfig
    step: int
    validation_loss: float


@dataclass
class TrainOutcome:
    checkpoint: Checkpoint
    metrics: list[MetricsRow]
    final_model: PrototypeModel


def batch_loss(
    model: PrototypeModel,
    x: np.ndarray,
    labels: np.ndarray,
    lam: float,
    prototype_loss_on_raw: bool = False,
) -> tuple[LossReport, ForwardTrace]:
    """Forward pass plus both loss terms for one batch."""
    trace = forward(model, x)
    targets = np.zeros((x.shape[0], model.label_space.n_classes), dtype=np.float64)
    targets[np.arange(x.shape[0]), labels] = 1.0
    l_c = loss_classification(trace.logits, targets)
    raw_dist = (
        pairwise_sqdist(x, model.bank.vectors) if prototype_loss_on_raw else None
    )
    l_p, covered = loss_prototype(trace, labels, model.bank.class_of, sqdist=raw_dist)
    total = loss_total(l_c, l_p, lam)
    return LossReport(l_c=l_c, l_p=l_p, total=total, lam=lam, covered_prototypes=covered), trace


def build_model(config: TrainConfig, dataset: Dataset) -> PrototypeModel:
    """Fit the normalizer, run per-class k-means, and assemble the initial model."""
    config.validate()
    norm = fit_normalizer(dataset)
    bank = init_prototypes(dataset, norm, config.prototypes_per_class, config.seed)
    adaptor = init_adaptor(
        config.adaptor, dataset.dim, np.random.default_rng([config.seed, 0xAD])
    )
    head = init_linear_head(dataset.label_space, bank)
    return PrototypeModel(
        label_space=dataset.label_space,
        normalizer=norm,
        bank=bank,
        adaptor=adaptor,
        head=head,
    )


def _snapshot_tensors(model: PrototypeModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.trainable_tensors().items()}


def _model_with_tensors(
    model: PrototypeModel, tensors: dict[str, np.ndarray]
) -> PrototypeModel:
    clone = PrototypeModel(
        label_space=model.label_space,
        normalizer=model.normalizer,
        bank=type(model.bank)(
            vectors=tensors["prototypes"].copy(), class_of=model.bank.class_of.copy()
        ),
        adaptor=Adaptor(
            model.adaptor.variant,
            {
                k.split(".", 1)[1]: tensors[k].copy()
                for k in tensors
                if k.startswith("adaptor.")
            },
        ),
        head=type(model.head)(
            weight=tensors["head.weight"].copy(), bias=tensors["head.bias"].copy()
        ),
    )
    return clone


def train(config: TrainConfig, dataset: Dataset) -> TrainOutcome:
    """Run the full training loop and return the lowest-validation checkpoint.

    Batches walk a seeded per-epoch shuffle of all normalized train segments.
    Validation computes the total loss over the whole valid split every
    validate_every steps and at the final step. Parameters are snapped to the
    float32 grid after every update so checkpoints round-trip bitwise.
    """
    config.validate()
    model = build_model(config, dataset)
    train_x, train_y, _ = split_rows(dataset, model.normalizer, "train")
    valid_x, valid_y, _ = split_rows(dataset, model.normalizer, "valid")

    params = model.trainable_tensors()
    state = AdamState.init(params)
    shuffle_rng = np.random.default_rng([config.seed, 0x5F])

    metrics: list[MetricsRow] = []
    best_step = -1
    best_val = np.inf
    best_tensors: dict[str, np.ndarray] | None = None

    order = shuffle_rng.permutation(train_x.shape[0])
    cursor = 0
    for step in range(config.total_steps):
        if cursor >= len(order):
            order = shuffle_rng.permutation(train_x.shape[0])
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size

        report, trace = batch_loss(
            model, train_x[idx], train_y[idx], config.lam, config.prototype_loss_on_raw
        )
        if not math.isfinite(report.total):
            last = metrics[-1].step if metrics else None
            raise ValidationError(
                f"training diverged at step {step} (last finite step: {last})"
            )
        targets = np.zeros((len(idx), model.label_space.n_classes), dtype=np.float64)
        targets[np.arange(len(idx)), train_y[idx]] = 1.0
        grads = backward(
            model, trace, targets, config.lam, config.prototype_loss_on_raw
        )
        lr = onecycle_lr(step, config.total_steps, config.peak_lr)
        adam_step(params, grads, state, lr, config.weight_decay)
        for name, value in params.items():
            np.copyto(value, f32_grid(value))

        row = MetricsRow(step=step, lr=lr, l_c=report.l_c, l_p=report.l_p, total=report.total)
        if (step + 1) % config.validate_every == 0 or step == config.total_steps - 1:
            val_report, _ = batch_loss(
                model, valid_x, valid_y, config.lam, config.prototype_loss_on_raw
            )
            row.val_total = val_report.total
            if val_report.total < best_val:
                best_val = val_report.total
                best_step = step
                best_tensors = _snapshot_tensors(model)
        metrics.append(row)

    assert best_tensors is not None
    checkpoint = Checkpoint(
        model=_model_with_tensors(model, best_tensors),
        config=config,
        step=best_step,
        validation_loss=float(best_val),
    )
    return TrainOutcome(checkpoint=checkpoint, metrics=metrics, final_model=model)


def write_metrics_csv(path, metrics: list[MetricsRow]) -> None:
    """Step-indexed training log; val_total is blank on non-validation steps."""
    lines = ["step,lr,l_c,l_p,total,val_total"]
    for row in metrics:
        val = repr(row.val_total) if row.val_total is not None else ""
        lines.append(
            f"{row.step},{row.lr!r},{row.l_c!r},{row.l_p!r},{row.total!r},{val}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    config = TrainConfig(**data)
    config.validate()
    return config
