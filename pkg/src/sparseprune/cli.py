"""Command-line harness: train a dense baseline, run the compression pipeline,
evaluate checkpoints, and render reports.

Configuration comes from an optional JSON file (nested keys flatten with
underscores) with command-line flags taking precedence. Every run directory
receives the resolved config and seeds, so runs are reproducible from the
directory contents alone. Exit codes: 0 success, 2 config/usage error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .compress import (
    PER_LAYER,
    PER_RESIDUAL_BLOCK,
    CompressionConfig,
    compression_ratio,
    count_flops,
    count_params,
    flops_speedup,
    layer_widths,
)
from .data import (
    Checkpoint,
    CheckpointError,
    DataFormatError,
    DatasetHandle,
    load_checkpoint,
    load_cifar10_bin,
    load_mnist_idx,
    make_dataset,
    save_checkpoint,
    synth_redundant,
)
from .driver import RunConfig, run_compression, select_lambda
from .nn import NumericError, accuracy, arch_from_dict, arch_to_dict, init_params
from .optim import DivergenceError, LRSchedule, sparse_train
from .presets import PRESETS, make_preset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DATASETS = ("mnist", "cifar10", "synth")
FORMATS = ("table", "csv", "json-lines")
UNIT_MODES = ("auto", PER_LAYER, PER_RESIDUAL_BLOCK)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    dataset: str = "synth"
    data_dir: str = ""
    arch: str = "lenet-small"
    seed: int = 0
    epochs: int = 5
    finetune_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.1
    lr_milestones: tuple = ()
    lambda0: float = 1e-3
    lambda_grid: bool = False
    rounds: int = 1
    epsilon: float = 0.1
    unit_mode: str = "auto"
    shrink_linear: bool = True
    out: str = "runs/latest"
    format: str = "table"
    baseline: str = ""
    from_scratch: bool = False
    synth_samples: int = 2000
    synth_informative: int = 2
    synth_noise: int = 2
    synth_classes: int = 4
    synth_image_size: int = 8

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.arch not in PRESETS:
            raise ConfigError(f"arch must be one of {PRESETS}, got {self.arch!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.unit_mode not in UNIT_MODES:
            raise ConfigError(f"unit_mode must be one of {UNIT_MODES}, got {self.unit_mode!r}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        for name in ("epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda0 <= 0:
            raise ConfigError(f"lambda0 must be positive, got {self.lambda0}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{name}_"))
        else:
            out[name] = value
    return out


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    flat = _flatten(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "lr_milestones" in flat:
        flat["lr_milestones"] = tuple(flat["lr_milestones"])
    return flat


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(ExperimentConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return ExperimentConfig(**values).validate()


# --------------------------------------------------------------------------
# Dataset / run-config assembly
# --------------------------------------------------------------------------


def _find_idx(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"data_dir: missing {stem}[.gz] under {data_dir}")


def load_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    if cfg.dataset == "synth":
        return synth_redundant(
            cfg.seed,
            cfg.synth_samples,
            cfg.synth_informative,
            cfg.synth_noise,
            cfg.synth_classes,
            image_size=cfg.synth_image_size,
        )
    if not cfg.data_dir:
        raise ConfigError(f"dataset {cfg.dataset!r} requires the data_dir field")
    root = Path(cfg.data_dir)
    if cfg.dataset == "mnist":
        train = load_mnist_idx(
            _find_idx(root, "train-images-idx3-ubyte"), _find_idx(root, "train-labels-idx1-ubyte")
        )
        test = load_mnist_idx(
            _find_idx(root, "t10k-images-idx3-ubyte"), _find_idx(root, "t10k-labels-idx1-ubyte")
        )
        return make_dataset(train, test, 10, 0.1, cfg.seed, provenance=f"mnist:{root}")
    batches = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [str(p) for p in batches + [root / "test_batch.bin"] if not p.exists()]
    if missing:
        raise ConfigError(f"data_dir: missing CIFAR-10 files: {', '.join(missing)}")
    train = load_cifar10_bin(batches)
    test = load_cifar10_bin([root / "test_batch.bin"])
    return make_dataset(train, test, 10, 0.1, cfg.seed, provenance=f"cifar10:{root}")


def build_run_config(cfg: ExperimentConfig, arch) -> RunConfig:
    if cfg.unit_mode == "auto":
        unit_mode = PER_RESIDUAL_BLOCK if any(b.residual for b in arch.blocks) else PER_LAYER
    else:
        unit_mode = cfg.unit_mode
    return RunConfig(
        lambda0=cfg.lambda0,
        max_rounds=cfg.rounds,
        explore_epochs=cfg.epochs,
        finetune_epochs=cfg.finetune_epochs,
        batch_size=cfg.batch_size,
        lr=LRSchedule(cfg.lr, milestones=tuple(cfg.lr_milestones)),
        compression=CompressionConfig(cfg.epsilon, unit_mode, cfg.shrink_linear),
        seed=cfg.seed,
    )


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_atomic(path: Path, text: str) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, payload) -> None:
    write_atomic(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


class EpochLogger:
    """Collects per-epoch records and flushes them as JSON lines."""

    def __init__(self):
        self.lines: list[str] = []

    def __call__(self, record: dict) -> None:
        self.lines.append(json.dumps(_jsonable(record), sort_keys=True))

    def flush(self, path: Path) -> None:
        write_atomic(path, "\n".join(self.lines) + ("\n" if self.lines else ""))


def widths_string(arch) -> str:
    return "-".join(str(w) for w in layer_widths(arch))


def _print_metrics(metrics: dict, fmt: str) -> None:
    if fmt == "json-lines":
        print(json.dumps(_jsonable(metrics), sort_keys=True))
    elif fmt == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerow(sorted(metrics))
        writer.writerow([_jsonable(metrics[k]) for k in sorted(metrics)])
    else:
        width = max(len(k) for k in metrics)
        for key in metrics:
            print(f"{key:<{width}}  {metrics[key]}")


def _run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(cfg: ExperimentConfig, out: Path) -> None:
    _write_json(out / "config.json", dataclasses.asdict(cfg))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train_baseline(cfg: ExperimentConfig) -> int:
    ds = load_dataset(cfg)
    arch = make_preset(cfg.arch, ds.input_shape, ds.class_count)
    out = _run_dir(cfg)
    _save_config(cfg, out)
    logger = EpochLogger()
    params, report = sparse_train(
        arch,
        init_params(arch, cfg.seed),
        ds,
        0.0,
        None,
        cfg.epochs,
        lr=LRSchedule(cfg.lr, milestones=tuple(cfg.lr_milestones)),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        on_epoch=logger,
    )
    logger.flush(out / "train_log.jsonl")
    test_acc = accuracy(arch, params, ds.test.images, ds.test.labels)
    metrics = {
        "dataset": cfg.dataset,
        "arch": cfg.arch,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "params": count_params(arch),
        "flops": count_flops(arch),
        "val_accuracy": report.val_accuracy,
        "test_accuracy": test_acc,
        "widths": widths_string(arch),
    }
    save_checkpoint(
        out / "baseline.ckpt",
        Checkpoint(arch, params, {"seed": cfg.seed, "lambda": 0.0, "epoch": cfg.epochs, "round": -1,
                                  "test_accuracy": test_acc, "val_accuracy": report.val_accuracy}),
    )
    _write_json(out / "metrics.json", metrics)
    _print_metrics(metrics, cfg.format)
    return EXIT_OK


def cmd_compress(cfg: ExperimentConfig) -> int:
    ds = load_dataset(cfg)
    if cfg.baseline:
        ckpt = load_checkpoint(cfg.baseline)
        arch0, params0 = ckpt.arch, ckpt.params
    elif cfg.from_scratch:
        arch0 = make_preset(cfg.arch, ds.input_shape, ds.class_count)
        params0 = init_params(arch0, cfg.seed)
    else:
        raise ConfigError("compress requires the baseline field (checkpoint path) or from_scratch")
    out = _run_dir(cfg)
    _save_config(cfg, out)
    rc = build_run_config(cfg, arch0)
    lambda_trials = None
    if cfg.lambda_grid:
        lam0, lambda_trials = select_lambda(arch0, params0, ds, rc)
        rc = replace(rc, lambda0=lam0)
    logger = EpochLogger()
    arch_star, params_star, history = run_compression(rc, arch0, ds, params0, on_epoch=logger)
    logger.flush(out / "train_log.jsonl")

    acc_before = accuracy(arch0, params0, ds.test.images, ds.test.labels)
    acc_after = accuracy(arch_star, params_star, ds.test.images, ds.test.labels)
    report = {
        "config": dataclasses.asdict(cfg),
        "lambda0": rc.lambda0,
        "lambda_trials": lambda_trials,
        "baseline": {
            "architecture": arch_to_dict(arch0),
            "params": count_params(arch0),
            "flops": count_flops(arch0),
            "widths": layer_widths(arch0),
            "val_accuracy": history.baseline_val_accuracy,
            "test_accuracy": acc_before,
        },
        "pruned": {
            "architecture": arch_to_dict(arch_star),
            "params": count_params(arch_star),
            "flops": count_flops(arch_star),
            "widths": layer_widths(arch_star),
            "test_accuracy": acc_after,
        },
        "metrics": {
            "compression_ratio": compression_ratio(arch0, arch_star),
            "flops_speedup": flops_speedup(arch0, arch_star),
            "accuracy_before": acc_before,
            "accuracy_after": acc_after,
        },
        "rounds": [dataclasses.asdict(r) for r in history.records],
    }
    _write_json(out / "report.json", report)
    write_atomic(out / "history.csv", _history_csv(report["rounds"]))
    save_checkpoint(
        out / "pruned.ckpt",
        Checkpoint(
            arch_star,
            params_star,
            {"seed": cfg.seed, "lambda": rc.lambda0, "epoch": cfg.finetune_epochs,
             "round": len(history.records), "test_accuracy": acc_after},
        ),
    )
    summary = {
        "widths_before": widths_string(arch0),
        "widths_after": widths_string(arch_star),
        "compression_ratio": round(report["metrics"]["compression_ratio"], 4),
        "flops_speedup": round(report["metrics"]["flops_speedup"], 4),
        "accuracy_before": acc_before,
        "accuracy_after": acc_after,
        "rounds": len(history.records),
        "out": str(out),
    }
    _print_metrics(summary, cfg.format)
    return EXIT_OK


_ROUND_COLUMNS = [
    "round", "lam", "size_before", "size", "flops", "val_accuracy", "sparsity", "wall_time", "widths", "warning",
]


def _history_csv(rounds: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_ROUND_COLUMNS)
    for r in rounds:
        row = dict(r)
        row["widths"] = "-".join(str(w) for w in r["widths"])
        writer.writerow([row[c] for c in _ROUND_COLUMNS])
    return buf.getvalue()


def cmd_evaluate(cfg: ExperimentConfig, checkpoint_path: str) -> int:
    ckpt = load_checkpoint(checkpoint_path)
    ds = load_dataset(cfg)
    test_acc = accuracy(ckpt.arch, ckpt.params, ds.test.images, ds.test.labels)
    metrics = {
        "checkpoint": str(checkpoint_path),
        "dataset": cfg.dataset,
        "test_accuracy": test_acc,
        "params": count_params(ckpt.arch),
        "flops": count_flops(ckpt.arch),
        "widths": widths_string(ckpt.arch),
    }
    _print_metrics(metrics, cfg.format)
    return EXIT_OK


_REPORT_KEYS = ("config", "baseline", "pruned", "metrics", "rounds")


def cmd_report(report_path: str, fmt: str) -> int:
    try:
        payload = json.loads(Path(report_path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"report file not found: {report_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"report file is not valid JSON: {exc}")
    missing = [k for k in _REPORT_KEYS if k not in payload]
    if missing:
        raise ConfigError(f"report schema mismatch: missing keys {', '.join(missing)}")

    base_arch = arch_from_dict(payload["baseline"]["architecture"])
    pruned_arch = arch_from_dict(payload["pruned"]["architecture"])
    recomputed_cr = compression_ratio(base_arch, pruned_arch)
    stored_cr = payload["metrics"]["compression_ratio"]
    if abs(recomputed_cr - stored_cr) > 1e-9:
        raise ConfigError(
            f"report self-consistency violation: stored CR {stored_cr} vs recomputed {recomputed_cr}"
        )
    recomputed_fx = flops_speedup(base_arch, pruned_arch)

    rounds_csv = _history_csv(payload["rounds"])
    summary = {
        "architecture": "-".join(str(w) for w in payload["pruned"]["widths"]),
        "compression_ratio": stored_cr,
        "flops_speedup": recomputed_fx,
        "accuracy": payload["metrics"]["accuracy_after"],
    }
    if fmt == "json-lines":
        for r in payload["rounds"]:
            print(json.dumps(_jsonable(r), sort_keys=True))
        print(json.dumps(_jsonable(summary), sort_keys=True))
    elif fmt == "csv":
        sys.stdout.write(rounds_csv)
        writer = csv.writer(sys.stdout)
        writer.writerow(summary.keys())
        writer.writerow(summary.values())
    else:
        sys.stdout.write(rounds_csv)
        print(f"architecture     {summary['architecture']}")
        print(f"compression_rate {summary['compression_ratio']:.4g}x")
        print(f"flops_speedup    {summary['flops_speedup']:.4g}x")
        print(f"accuracy         {summary['accuracy']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override file values")
    parser.add_argument("--dataset", choices=DATASETS)
    parser.add_argument("--data-dir", dest="data_dir")
    parser.add_argument("--arch", choices=PRESETS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--lambda0", type=float)
    parser.add_argument("--lambda-grid", dest="lambda_grid", action="store_const", const=True)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--out")
    parser.add_argument("--format", choices=FORMATS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseprune",
        description="L1-driven structural filter pruning for small CNNs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train-baseline", help="train a dense model (lambda = 0)")
    _add_common(p_train)

    p_comp = sub.add_parser("compress", help="run the sparse-train / shrink / fine-tune pipeline")
    _add_common(p_comp)
    p_comp.add_argument("--baseline", help="baseline checkpoint to start from")
    p_comp.add_argument("--from-scratch", dest="from_scratch", action="store_const", const=True)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint")
    _add_common(p_eval)

    p_rep = sub.add_parser("report", help="render a compression report")
    p_rep.add_argument("report_path")
    p_rep.add_argument("--format", choices=FORMATS, default="table")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.report_path, args.format)
        cfg = resolve_config(args)
        if args.command == "train-baseline":
            return cmd_train_baseline(cfg)
        if args.command == "compress":
            return cmd_compress(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
