"""Command-line entry point wiring the modules into operator workflows.

Subcommands: train, eval, explain, export-protos, self-check, synth-data,
inspect-init. Precedence for settings is flags > config file > defaults;
the fully resolved configuration is echoed into every output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluator, explain, synthlab, trainer
from .embedstore import fit_normalizer, load_dataset, split_rows
from .errors import ProtoscopeError, ValidationError
from .initkit import kmeans
from .protonet import pairwise_sqdist

ADAPTOR_FLAGS = {
    "identity": "identity",
    "residual-mlp": "residual_mlp",
    "set-attention": "set_attention",
}
ADAPTOR_NAMES = {v: k for k, v in ADAPTOR_FLAGS.items()}

# Desk-scale default; the full-scale step count stays available via --steps.
DEFAULT_CLI_STEPS = 10_000

CONFIG_KEYS = (
    "manifest",
    "seed",
    "lambda",
    "prototypes_per_class",
    "adaptor",
    "batch_size",
    "steps",
    "peak_lr",
    "weight_decay",
    "validate_every",
    "prototype_loss_on_raw",
)


def _read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _resolve_train_settings(args: argparse.Namespace) -> dict:
    """flags > config file > built-in defaults (paper values where stated)."""
    resolved: dict = {
        "manifest": None,
        "seed": None,
        "lambda": 0.25,
        "prototypes_per_class": 5,
        "adaptor": "set-attention",
        "batch_size": 256,
        "steps": DEFAULT_CLI_STEPS,
        "peak_lr": 1e-3,
        "weight_decay": 1e-5,
        "validate_every": 500,
        "prototype_loss_on_raw": False,
    }
    if args.config:
        file_values = _read_config_file(Path(args.config))
        casts = {
            "manifest": str,
            "seed": int,
            "lambda": float,
            "prototypes_per_class": int,
            "adaptor": str,
            "batch_size": int,
            "steps": int,
            "peak_lr": float,
            "weight_decay": float,
            "validate_every": int,
            "prototype_loss_on_raw": _parse_bool,
        }
        for key, raw in file_values.items():
            resolved[key] = casts[key](raw)
    overrides = {
        "manifest": args.manifest,
        "seed": args.seed,
        "lambda": getattr(args, "lam", None),
        "prototypes_per_class": args.prototypes_per_class,
        "adaptor": args.adaptor,
        "batch_size": args.batch_size,
        "steps": args.steps,
        "peak_lr": args.peak_lr,
        "weight_decay": args.weight_decay,
        "validate_every": args.validate_every,
        "prototype_loss_on_raw": True if args.prototype_loss_on_raw else None,
    }
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    if resolved["seed"] is None:
        resolved["seed"] = int(os.environ.get("PROTOSCOPE_SEED", "0"))
    if resolved["manifest"] is None:
        raise ValidationError("a manifest is required (--manifest or config file)")
    if resolved["adaptor"] not in ADAPTOR_FLAGS:
        raise ValidationError(f"unknown adaptor {resolved['adaptor']!r}")
    return resolved


def _echo_config(out_dir: Path, resolved: dict) -> None:
    lines = [f"{key}={resolved[key]}" for key in CONFIG_KEYS]
    (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_config(resolved: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        lam=float(resolved["lambda"]),
        batch_size=int(resolved["batch_size"]),
        total_steps=int(resolved["steps"]),
        peak_lr=float(resolved["peak_lr"]),
        weight_decay=float(resolved["weight_decay"]),
        seed=int(resolved["seed"]),
        validate_every=int(resolved["validate_every"]),
        adaptor=ADAPTOR_FLAGS[resolved["adaptor"]],
        prototypes_per_class=int(resolved["prototypes_per_class"]),
        prototype_loss_on_raw=bool(resolved["prototype_loss_on_raw"]),
    )


def _cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolve_train_settings(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, resolved)
    dataset = load_dataset(resolved["manifest"])
    config = _train_config(resolved)
    outcome = trainer.train(config, dataset)
    ckpt.save_checkpoint(out_dir / "checkpoint.pckp", outcome.checkpoint)
    trainer.write_metrics_csv(out_dir / "metrics.csv", outcome.metrics)
    print(
        f"trained {config.total_steps} steps; best validation loss "
        f"{outcome.checkpoint.validation_loss!r} at step {outcome.checkpoint.step}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    report = evaluator.evaluate(loaded.model, dataset, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluator.write_report_json(out_dir / "eval.json", report)
    evaluator.write_confusion_csv(out_dir / "confusion.csv", report)
    evaluator.write_predictions_csv(out_dir / "predictions.csv", report)
    print(f"class_normalized_accuracy={report.class_normalized_accuracy!r}")
    return 0


def _cmd_explain(args: argparse.Namespace) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    out_dir = Path(args.out) / "explanations"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(dataset.split(args.split), key=lambda r: r.id)
    top_k = args.top_k or loaded.model.bank.n_prototypes
    for record in records:
        result = explain.explain_prediction(loaded.model, record, top_k)
        (out_dir / f"{record.id}.json").write_text(
            json.dumps(explain.explanation_to_dict(result), indent=2, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )
    print(f"wrote {len(records)} explanations to {out_dir}")
    return 0


def _cmd_export_protos(args: argparse.Namespace) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    out_dir = Path(args.out) / "protos"
    explain.export_prototypes(loaded.model, dataset, out_dir, checkpoint_hash=digest)
    print(f"exported {loaded.model.bank.n_prototypes} prototypes to {out_dir}")
    return 0


def _cmd_self_check(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("PROTOSCOPE_SEED", "0"))
    grad_cases = synthlab.gradient_check_suite(n_configs=100, seed=2024 + seed)
    grad_ok = all(c.passed for c in grad_cases)
    worst_rel = max(c.max_rel_err for c in grad_cases)
    print(
        f"{'PASS' if grad_ok else 'FAIL'}: gradient oracle "
        f"({len(grad_cases)} configs, max rel err {worst_rel:.3e})"
    )
    km_cases = synthlab.kmeans_oracle_suite(n_instances=50, seed=7 + seed)
    km_ok = all(c.passed for c in km_cases)
    print(f"{'PASS' if km_ok else 'FAIL'}: k-means oracle ({len(km_cases)} instances)")
    return 0 if grad_ok and km_ok else 1


def _cmd_synth_data(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("PROTOSCOPE_SEED", "0"))
    spec = synthlab.BlobSpec(
        n_classes=args.classes,
        per_class=args.per_class,
        dim=args.dim,
        center_scale=args.center_scale,
        noise_std=args.noise_std,
        segments_per_track=args.segments,
        seed=seed,
    )
    manifest = synthlab.gen_blobs(spec, args.out)
    print(f"wrote blob dataset manifest {manifest}")
    return 0


def _cmd_inspect_init(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("PROTOSCOPE_SEED", "0"))
    dataset = load_dataset(args.manifest)
    norm = fit_normalizer(dataset)
    rows, labels, _ = split_rows(dataset, norm, "train")
    summary = []
    for c, name in enumerate(dataset.label_space.classes):
        class_rows = rows[labels == c]
        result = kmeans(class_rows, args.prototypes_per_class, seed=seed + c)
        center = class_rows.mean(axis=0)
        dists = pairwise_sqdist(result.centroids, center[None, :])[:, 0]
        summary.append(
            {
                "class": name,
                "train_rows": int(class_rows.shape[0]),
                "inertia": result.inertia,
                "prototype_center_sqdist": [float(v) for v in dists],
            }
        )
    text = json.dumps({"classes": summary}, indent=2, sort_keys=True)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "init_summary.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoscope",
        description="Prototype-based interpretable classifier over embedding files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="train a model from a manifest")
    train_p.add_argument("--manifest", help="dataset manifest (JSON Lines)")
    train_p.add_argument("--out", required=True, help="output directory")
    train_p.add_argument("--config", help="key=value config file")
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--lambda", dest="lam", type=float)
    train_p.add_argument("--prototypes-per-class", type=int, dest="prototypes_per_class")
    train_p.add_argument("--adaptor", choices=sorted(ADAPTOR_FLAGS))
    train_p.add_argument("--batch-size", type=int, dest="batch_size")
    train_p.add_argument("--steps", type=int)
    train_p.add_argument("--peak-lr", type=float, dest="peak_lr")
    train_p.add_argument("--weight-decay", type=float, dest="weight_decay")
    train_p.add_argument("--validate-every", type=int, dest="validate_every")
    train_p.add_argument(
        "--prototype-loss-on-raw",
        action="store_true",
        dest="prototype_loss_on_raw",
        help="score the prototype loss on raw instead of adapted prototypes",
    )
    train_p.set_defaults(func=_cmd_train)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--manifest", required=True)
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    eval_p.set_defaults(func=_cmd_eval)

    explain_p = sub.add_parser("explain", help="write per-track explanations")
    explain_p.add_argument("--checkpoint", required=True)
    explain_p.add_argument("--manifest", required=True)
    explain_p.add_argument("--out", required=True)
    explain_p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    explain_p.add_argument("--top-k", type=int, dest="top_k")
    explain_p.set_defaults(func=_cmd_explain)

    export_p = sub.add_parser("export-protos", help="export prototype vectors as PEMB")
    export_p.add_argument("--checkpoint", required=True)
    export_p.add_argument("--manifest", required=True)
    export_p.add_argument("--out", required=True)
    export_p.set_defaults(func=_cmd_export_protos)

    check_p = sub.add_parser("self-check", help="run the gradient and k-means oracles")
    check_p.add_argument("--seed", type=int)
    check_p.set_defaults(func=_cmd_self_check)

    synth_p = sub.add_parser("synth-data", help="generate a synthetic blob dataset")
    synth_p.add_argument("--out", required=True)
    synth_p.add_argument("--classes", type=int, default=4)
    synth_p.add_argument("--per-class", type=int, default=100, dest="per_class")
    synth_p.add_argument("--dim", type=int, default=16)
    synth_p.add_argument("--center-scale", type=float, default=10.0, dest="center_scale")
    synth_p.add_argument("--noise-std", type=float, default=1.0, dest="noise_std")
    synth_p.add_argument("--segments", type=int, default=4)
    synth_p.add_argument("--seed", type=int)
    synth_p.set_defaults(func=_cmd_synth_data)

    inspect_p = sub.add_parser("inspect-init", help="summarize the k-means initialization")
    inspect_p.add_argument("--manifest", required=True)
    inspect_p.add_argument(
        "--prototypes-per-class", type=int, default=5, dest="prototypes_per_class"
    )
    inspect_p.add_argument("--seed", type=int)
    inspect_p.add_argument("--out")
    inspect_p.set_defaults(func=_cmd_inspect_init)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtoscopeError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
