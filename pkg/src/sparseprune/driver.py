"""Orchestration of the alternating compress loop.

Each round: sparse-train the current architecture under the current lambda,
convert the zero pattern into a structurally smaller architecture, rescale
lambda by the model-size ratio, and stop when the size/sparsity trajectory
flattens, validation accuracy regresses, or the round budget is exhausted.
The best checkpoint (highest validation accuracy at no larger size) is then
fine-tuned densely (lambda = 0) from its survivor weights.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .compress import (
    CompressionConfig,
    compress_model,
    count_flops,
    count_params,
    layer_widths,
    overall_sparsity,
)
from .data import DatasetHandle
from .nn import Architecture, NumericError, accuracy, init_params, iter_batches, model_backward
from .optim import (
    DivergenceError,
    LRSchedule,
    SwitchSchedule,
    sparse_train,
)

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "RoundRecord",
    "CompressionHistory",
    "lambda_update",
    "check_convergence",
    "run_compression",
    "fine_tune",
    "select_lambda",
    "LAMBDA_GRID",
]

LAMBDA_GRID = (1e-2, 1e-3, 1e-4, 1e-5)


@dataclass(frozen=True)
class RunConfig:
    lambda0: float
    max_rounds: int = 1
    explore_epochs: int = 6
    finetune_epochs: int = 6
    batch_size: int = 64
    lr: LRSchedule = LRSchedule(0.1)
    finetune_lr: Optional[LRSchedule] = None
    switch: Optional[SwitchSchedule] = None
    compression: CompressionConfig = CompressionConfig()
    seed: int = 0
    size_threshold: float = 0.01
    sparsity_threshold: float = 0.01
    acc_regression_threshold: float = 0.02
    convergence_window: int = 1

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError(f"initial lambda must be positive, got {self.lambda0}")
        if self.max_rounds < 1:
            raise ValueError(f"round budget must be >= 1, got {self.max_rounds}")
        for name in ("size_threshold", "sparsity_threshold", "acc_regression_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.convergence_window < 1:
            raise ValueError("convergence window must be >= 1")


@dataclass
class RoundRecord:
    round: int
    lam: float
    profile: tuple[float, ...]
    size_before: int
    size: int
    flops: int
    val_accuracy: float
    sparsity: float
    wall_time: float
    widths: list[int]
    warning: str = ""


@dataclass
class CompressionHistory:
    baseline_size: int
    baseline_flops: int
    baseline_val_accuracy: float
    baseline_sparsity: float = 0.0
    records: list[RoundRecord] = field(default_factory=list)

    def completed(self) -> list[RoundRecord]:
        return [r for r in self.records if not r.warning]

    def best_index(self) -> int:
        """Best completed round: max validation accuracy among records whose
        size does not exceed the baseline; ties go to the earlier round."""
        candidates = [
            (i, r) for i, r in enumerate(self.records) if not r.warning and r.size <= self.baseline_size
        ]
        if not candidates:
            raise ValueError("no completed round to select from")
        return max(candidates, key=lambda ir: (ir[1].val_accuracy, -ir[0]))[0]


def lambda_update(lambda_t: float, size_new: int, size_old: int) -> float:
    """lambda_{t+1} = (|M_{t+1}| / |M_t|) * lambda_t."""
    if size_new <= 0 or size_old <= 0:
        raise ValueError(f"model sizes must be positive, got {size_new} and {size_old}")
    return lambda_t * (size_new / size_old)


def _rel_change(cur: float, prev: float) -> float:
    if prev == 0:
        return 0.0 if cur == 0 else float("inf")
    return abs(cur - prev) / abs(prev)


def check_convergence(history: CompressionHistory, config: RunConfig) -> bool:
    """True when (a) size and sparsity are flat over the window, (b) validation
    accuracy regressed below the best by more than the threshold, or (c) the
    round budget is spent. The baseline acts as the round before round 0."""
    records = history.completed()
    if not records:
        return len(history.records) >= config.max_rounds
    sizes = [history.baseline_size] + [r.size for r in records]
    sparsities = [history.baseline_sparsity] + [r.sparsity for r in records]
    w = config.convergence_window
    if len(sizes) > w:
        flat_size = _rel_change(sizes[-1], sizes[-1 - w]) < config.size_threshold
        flat_sparsity = _rel_change(sparsities[-1], sparsities[-1 - w]) < config.sparsity_threshold
        if flat_size and flat_sparsity:
            return True
    best_acc = max([history.baseline_val_accuracy] + [r.val_accuracy for r in records])
    if best_acc - records[-1].val_accuracy > config.acc_regression_threshold:
        return True
    return len(history.records) >= config.max_rounds


def fine_tune(
    arch: Architecture,
    params_survivor: dict,
    dataset: DatasetHandle,
    epochs: int,
    *,
    lr: LRSchedule = LRSchedule(0.05),
    batch_size: int = 64,
    seed: int = 0,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> dict:
    """Plain SGD (lambda = 0) from survivor weights; the architecture never changes.

    Returns the epoch checkpoint with the best validation accuracy (the
    starting weights count as a candidate); zero epochs returns the input
    unchanged. On divergence the best checkpoint so far is returned.
    """
    params = {k: v.copy() for k, v in params_survivor.items()}
    if epochs == 0:
        return params
    val = dataset.validation
    score = lambda p: accuracy(arch, p, val.images, val.labels) if len(val) else float("nan")
    best_acc = score(params)
    best = {k: v.copy() for k, v in params.items()}
    rng = np.random.default_rng(seed)
    train = dataset.train
    n = len(train)
    reference = None
    for epoch in range(epochs):
        eta = lr.at_epoch(epoch)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for sl in iter_batches(n, batch_size):
            idx = perm[sl.start : sl.stop]
            loss, grads = model_backward(arch, params, train.images[idx], train.labels[idx])
            epoch_loss += loss * len(idx)
            for k in params:
                params[k] = params[k] - eta * grads[k]
        epoch_loss /= n
        if reference is None:
            reference = epoch_loss
        acc = score(params)
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "f": epoch_loss, "val_accuracy": acc})
        if not (acc <= best_acc):  # NaN-safe: keep latest when no validation split
            best_acc = acc
            best = {k: v.copy() for k, v in params.items()}
        if epoch_loss > 10.0 * max(reference, 1e-12):
            log.warning("fine-tuning diverged at epoch %d; returning best checkpoint", epoch)
            return best
    return best


def run_compression(
    config: RunConfig,
    arch0: Architecture,
    dataset: DatasetHandle,
    params0: Optional[dict] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> tuple[Architecture, dict, CompressionHistory]:
    """Alternate sparse training and structural compression, then fine-tune.

    ``params0`` is normally a trained dense baseline; without it training
    starts from fresh initialization. Returns the pruned architecture, its
    fine-tuned (dense, lambda = 0) weights, and the per-round history.
    """
    params_t = {k: v.copy() for k, v in (params0 or init_params(arch0, config.seed)).items()}
    arch_t = arch0
    val = dataset.validation
    baseline_acc = accuracy(arch0, params_t, val.images, val.labels) if len(val) else float("nan")
    history = CompressionHistory(
        baseline_size=count_params(arch0),
        baseline_flops=count_flops(arch0),
        baseline_val_accuracy=baseline_acc,
        baseline_sparsity=overall_sparsity(params_t),
    )
    checkpoints: list[tuple[Architecture, dict]] = []
    lam = config.lambda0
    for t in range(config.max_rounds):
        started = time.perf_counter()
        try:
            w_t, report = sparse_train(
                arch_t,
                params_t,
                dataset,
                lam,
                config.switch,
                config.explore_epochs,
                lr=config.lr,
                batch_size=config.batch_size,
                seed=config.seed + t,
                on_epoch=on_epoch,
            )
        except (DivergenceError, NumericError) as exc:
            log.warning("round %d aborted: %s", t, exc)
            history.records.append(
                RoundRecord(
                    round=t,
                    lam=lam,
                    profile=(),
                    size_before=count_params(arch_t),
                    size=count_params(arch_t),
                    flops=count_flops(arch_t),
                    val_accuracy=float("nan"),
                    sparsity=float("nan"),
                    wall_time=time.perf_counter() - started,
                    widths=layer_widths(arch_t),
                    warning=str(exc),
                )
            )
            break
        new_arch, new_params, profile, plan = compress_model(arch_t, w_t, config.compression)
        size_old = count_params(arch_t)
        size_new = count_params(new_arch)
        history.records.append(
            RoundRecord(
                round=t,
                lam=lam,
                profile=profile.ratios,
                size_before=size_old,
                size=size_new,
                flops=count_flops(new_arch),
                val_accuracy=report.val_accuracy,
                sparsity=overall_sparsity(w_t),
                wall_time=time.perf_counter() - started,
                widths=layer_widths(new_arch),
            )
        )
        checkpoints.append((new_arch, new_params))
        lam = lambda_update(lam, size_new, size_old)
        arch_t, params_t = new_arch, new_params
        if check_convergence(history, config):
            break

    if checkpoints:
        best = history.best_index()
        arch_star, params_survivor = checkpoints[best]
    else:
        # every round aborted: fall back to the starting model
        arch_star, params_survivor = arch0, params_t
    params_star = fine_tune(
        arch_star,
        params_survivor,
        dataset,
        config.finetune_epochs,
        lr=config.finetune_lr or config.lr,
        batch_size=config.batch_size,
        seed=config.seed + 7919,
        on_epoch=on_epoch,
    )
    return arch_star, params_star, history


def select_lambda(
    arch: Architecture,
    params: dict,
    dataset: DatasetHandle,
    config: RunConfig,
    grid: tuple[float, ...] = LAMBDA_GRID,
    tolerance: float = 0.005,
) -> tuple[float, dict[float, float]]:
    """Pick the largest grid lambda whose exploration validation accuracy stays
    within ``tolerance`` of the unregularized run; falls back to the smallest."""
    common = dict(
        schedule=config.switch,
        epochs=config.explore_epochs,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    _, base_report = sparse_train(arch, params, dataset, 0.0, **common)
    base_acc = base_report.val_accuracy
    trials: dict[float, float] = {0.0: base_acc}
    for lam in sorted(grid, reverse=True):
        _, report = sparse_train(arch, params, dataset, lam, **common)
        trials[lam] = report.val_accuracy
        if report.val_accuracy >= base_acc - tolerance:
            return lam, trials
    return min(grid), trials
