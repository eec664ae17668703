"""L1-regularized stochastic training.

Three explorers over the objective F(w) = f(w) + lambda * ||w||_1, where f is
mean softmax cross-entropy and the L1 term covers conv/linear weight matrices
only (never biases):

* plain SGD (the lambda = 0 degenerate case),
* proximal SGD: w <- soft_threshold(w - eta*grad, eta*lambda),
* an orthant-face step: a pseudo-gradient move inside the orthant fixed by a
  sign reference frozen at phase entry, projecting sign flips to exact zero.

``sparse_train`` alternates proximal and orthant phases per a switch
schedule. Zeros are produced as representable zeros, so sparsity statistics
count exact equality with 0.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DatasetHandle, Split
from .nn import (
    Architecture,
    Conv2D,
    Linear,
    NumericError,
    accuracy,
    infer_shapes,
    iter_batches,
    model_backward,
    model_forward,
    softmax_cross_entropy,
    validate_params,
    weight_key,
)

MODE_PROX = "prox"
MODE_ORTHANT = "orthant"

__all__ = [
    "MODE_PROX",
    "MODE_ORTHANT",
    "DivergenceError",
    "LRSchedule",
    "SwitchSchedule",
    "OptimizerState",
    "ObjectiveValue",
    "TrainReport",
    "soft_threshold",
    "penalized_keys",
    "make_optimizer_state",
    "enter_prox_phase",
    "enter_orthant_phase",
    "prox_sgd_step",
    "orthant_step",
    "phase_modes",
    "sparse_train",
    "evaluate_objective",
    "mean_loss",
]


class DivergenceError(RuntimeError):
    """Mean epoch objective exceeded 10x the initial objective."""

    def __init__(self, epoch: int, value: float, reference: float):
        super().__init__(
            f"training diverged at epoch {epoch}: mean objective {value:.6g} "
            f"exceeds 10x initial objective {reference:.6g}"
        )
        self.epoch = epoch
        self.value = value
        self.reference = reference


@dataclass(frozen=True)
class LRSchedule:
    """Constant step size, decayed by ``factor`` at each epoch milestone."""

    base: float
    factor: float = 0.1
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError(f"step size must be positive, got {self.base}")

    def at_epoch(self, epoch: int) -> float:
        decays = sum(1 for m in self.milestones if epoch >= m)
        return self.base * self.factor**decays


@dataclass(frozen=True)
class SwitchSchedule:
    """Per-cycle epoch counts: prox first, then orthant, repeated."""

    prox_epochs: int
    orthant_epochs: int
    repeats: int = 1

    def __post_init__(self):
        if self.prox_epochs < 0 or self.orthant_epochs < 0 or self.repeats < 1:
            raise ValueError(f"bad switch schedule {self}")
        if self.prox_epochs + self.orthant_epochs == 0:
            raise ValueError("switch schedule must contain at least one epoch")


def phase_modes(schedule: Optional[SwitchSchedule], epochs: int) -> list[str]:
    """Expand a schedule to one mode per epoch, cycling the pattern as needed.

    A ``None`` schedule means prox for the first half (rounded up), orthant
    for the rest.
    """
    if schedule is None:
        prox = (epochs + 1) // 2
        schedule = SwitchSchedule(prox, epochs - prox) if epochs - prox > 0 else SwitchSchedule(prox, 0)
    pattern = [MODE_PROX] * schedule.prox_epochs + [MODE_ORTHANT] * schedule.orthant_epochs
    return [pattern[e % len(pattern)] for e in range(epochs)]


@dataclass
class OptimizerState:
    """Single-owner state for one training loop."""

    iterate: dict[str, np.ndarray]
    lr: LRSchedule
    lam: float
    penalized: frozenset[str]
    mode: str = MODE_PROX
    sign_ref: Optional[dict[str, np.ndarray]] = None
    seed: int = 0
    epoch: int = 0
    step: int = 0

    @property
    def step_size(self) -> float:
        return self.lr.at_epoch(self.epoch)


def penalized_keys(arch: Architecture) -> frozenset[str]:
    return frozenset(
        weight_key(i) for i, spec in enumerate(arch.layers) if isinstance(spec, (Conv2D, Linear))
    )


def make_optimizer_state(arch, params, lam, lr: LRSchedule, seed: int = 0) -> OptimizerState:
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    validate_params(arch, params)
    iterate = {k: v.copy() for k, v in params.items()}
    return OptimizerState(iterate, lr, float(lam), penalized_keys(arch), seed=seed)


def soft_threshold(z, t):
    """Elementwise sign(z) * max(|z| - t, 0); t must be nonnegative."""
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")
    z = np.asarray(z)
    out = np.sign(z) * np.maximum(np.abs(z) - t, 0)
    return out if out.ndim else out.item()


def _check_grads(grads: dict, step: int) -> None:
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {key!r} at step {step}")


def enter_prox_phase(state: OptimizerState) -> None:
    state.mode = MODE_PROX
    state.sign_ref = None


def enter_orthant_phase(state: OptimizerState) -> None:
    """Freeze the sign reference at the current iterate."""
    state.mode = MODE_ORTHANT
    state.sign_ref = {k: np.sign(state.iterate[k]) for k in state.penalized}


def prox_sgd_step(state: OptimizerState, grads: dict) -> OptimizerState:
    """One proximal SGD step: gradient move then soft-threshold on penalized keys."""
    if state.mode != MODE_PROX:
        raise ValueError(f"prox step requires mode {MODE_PROX!r}, state is in {state.mode!r}")
    _check_grads(grads, state.step)
    eta = state.step_size
    t = eta * state.lam
    for key, w in state.iterate.items():
        z = w - eta * grads[key]
        if key in state.penalized and t > 0:
            z = np.sign(z) * np.maximum(np.abs(z) - t, 0)
        state.iterate[key] = z
    state.step += 1
    return state


def orthant_step(state: OptimizerState, grads: dict) -> OptimizerState:
    """Pseudo-gradient step inside the frozen orthant; sign flips land on exact 0.

    Coordinates whose frozen reference sign is zero stay exactly zero, and any
    coordinate that reaches zero is absorbed for the rest of the phase.
    """
    if state.mode != MODE_ORTHANT:
        raise ValueError(f"orthant step requires mode {MODE_ORTHANT!r}, state is in {state.mode!r}")
    if state.sign_ref is None:
        raise ValueError("orthant step requires a sign reference recorded at phase entry")
    _check_grads(grads, state.step)
    eta = state.step_size
    for key, w in state.iterate.items():
        if key in state.penalized:
            ref = state.sign_ref[key]
            z = w - eta * (grads[key] + state.lam * ref)
            z[(np.sign(z) != ref) | (w == 0)] = 0.0
            state.iterate[key] = z
        else:
            state.iterate[key] = w - eta * grads[key]
    state.step += 1
    return state


# --------------------------------------------------------------------------
# Objective evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveValue:
    F: float
    f: float
    l1: float
    per_layer_sparsity: dict[int, float]


def mean_loss(arch, params, split: Split, batch_size: int = 256) -> float:
    """Mean cross-entropy over a split, accumulated in float64."""
    total = 0.0
    for sl in iter_batches(len(split), batch_size):
        logits = model_forward(arch, params, split.images[sl])
        loss, _ = softmax_cross_entropy(logits, split.labels[sl])
        total += loss * (sl.stop - sl.start)
    return total / len(split)


def _sparsity_by_layer(arch, params) -> dict[int, float]:
    out = {}
    for i, spec in enumerate(arch.layers):
        if isinstance(spec, (Conv2D, Linear)):
            w = params[weight_key(i)]
            out[i] = float((w == 0).sum() / w.size)
    return out


def evaluate_objective(arch, params, split: Split, lam: float, batch_size: int = 256) -> ObjectiveValue:
    """F = f + lambda * l1 with exact-zero sparsity per penalized layer."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    f = mean_loss(arch, params, split, batch_size)
    l1 = float(sum(np.abs(params[k]).sum(dtype=np.float64) for k in penalized_keys(arch)))
    return ObjectiveValue(f + lam * l1, f, l1, _sparsity_by_layer(arch, params))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainReport:
    final: ObjectiveValue
    val_accuracy: float
    records: list[dict] = field(default_factory=list)


def sparse_train(
    arch: Architecture,
    params: dict,
    dataset: DatasetHandle,
    lam: float,
    schedule: Optional[SwitchSchedule],
    epochs: int,
    *,
    lr: LRSchedule = LRSchedule(0.1),
    batch_size: int = 64,
    seed: int = 0,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> tuple[dict, TrainReport]:
    """Train under F = f + lambda*||w||_1, alternating prox and orthant phases.

    With lambda = 0 every epoch runs plain SGD (both step kinds degenerate to
    it, so the schedule is ignored). Raises DivergenceError if a full epoch's
    mean objective exceeds 10x the initial objective.
    """
    state = make_optimizer_state(arch, params, lam, lr, seed)
    modes = phase_modes(schedule, epochs) if lam > 0 else [MODE_PROX] * epochs
    rng = np.random.default_rng(seed)
    train = dataset.train
    n = len(train)
    if n == 0:
        raise ValueError("empty training split")

    probe = slice(0, min(n, 4096))
    reference = evaluate_objective(arch, state.iterate, Split(train.images[probe], train.labels[probe]), lam).F
    step_fn = {MODE_PROX: prox_sgd_step, MODE_ORTHANT: orthant_step}
    records: list[dict] = []

    for epoch in range(epochs):
        mode = modes[epoch]
        if mode != state.mode or (mode == MODE_ORTHANT and state.sign_ref is None):
            enter_orthant_phase(state) if mode == MODE_ORTHANT else enter_prox_phase(state)
        state.epoch = epoch
        perm = rng.permutation(n)
        epoch_f = 0.0
        for sl in iter_batches(n, batch_size):
            idx = perm[sl.start : sl.stop]
            loss, grads = model_backward(arch, state.iterate, train.images[idx], train.labels[idx])
            epoch_f += loss * len(idx)
            step_fn[mode](state, grads)
        l1 = float(sum(np.abs(state.iterate[k]).sum(dtype=np.float64) for k in state.penalized))
        epoch_f /= n
        epoch_F = epoch_f + lam * l1
        record = {
            "epoch": epoch,
            "mode": mode,
            "step_size": state.step_size,
            "F": epoch_F,
            "f": epoch_f,
            "l1": l1,
            "sparsity": _sparsity_by_layer(arch, state.iterate),
            "val_accuracy": accuracy(arch, state.iterate, dataset.validation.images, dataset.validation.labels)
            if len(dataset.validation)
            else float("nan"),
        }
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if epoch_F > 10.0 * max(reference, 1e-12):
            raise DivergenceError(epoch, epoch_F, reference)

    final = evaluate_objective(arch, state.iterate, train, lam)
    val_acc = (
        accuracy(arch, state.iterate, dataset.validation.images, dataset.validation.labels)
        if len(dataset.validation)
        else float("nan")
    )
    report = TrainReport(final=final, val_accuracy=val_acc, records=records)
    return state.iterate, report
