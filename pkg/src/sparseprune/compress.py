"""Structural compression of a sparse network.

Pipeline: pool exact-zero ratios per pruning unit (single layers, or whole
residual blocks when channel consistency pins their widths), shrink each
prunable layer's filter count by the sparsity of its downstream unit with a
floor ``epsilon`` on the kept fraction, pick surviving filters by largest row
L1 norm, then calibrate the candidate architecture so every channel/feature
count chains consistently and residual adds stay width-matched.

Accounting: conv FLOPs are 2*C_in*kh*kw*Ho*Wo*C_out, linear 2*in*out;
pooling/activations count zero. Parameter counts include biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import (
    Architecture,
    Block,
    Conv2D,
    Linear,
    ShapeError,
    bias_key,
    flatten_kernel_matrix,
    infer_shapes,
    validate_params,
    weight_key,
)

PER_LAYER = "per-layer"
PER_RESIDUAL_BLOCK = "per-residual-block"

__all__ = [
    "PER_LAYER",
    "PER_RESIDUAL_BLOCK",
    "CompressionConfig",
    "PruningUnit",
    "SparsityProfile",
    "ShrinkPlan",
    "layer_sparsity",
    "block_sparsity",
    "overall_sparsity",
    "pruning_units",
    "compute_profile",
    "make_shrink_plan",
    "select_survivors",
    "apply_counts",
    "calibrate",
    "extract_survivor_params",
    "compress_model",
    "count_flops",
    "count_params",
    "compression_ratio",
    "flops_speedup",
    "layer_widths",
]


@dataclass(frozen=True)
class CompressionConfig:
    epsilon: float = 0.1
    unit_mode: str = PER_LAYER
    shrink_linear_layers: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.unit_mode not in (PER_LAYER, PER_RESIDUAL_BLOCK):
            raise ValueError(f"unknown unit mode {self.unit_mode!r}")


@dataclass(frozen=True)
class PruningUnit:
    """A pruning unit: the parameterized layers it covers, in forward order."""

    layers: tuple[int, ...]
    residual: bool = False


@dataclass(frozen=True)
class SparsityProfile:
    """Exact-zero ratios, one per pruning unit, in architecture order."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"sparsity ratio {r} outside [0, 1]")


@dataclass
class ShrinkPlan:
    """Old and new filter counts per prunable layer, plus survivor indices."""

    old_counts: dict[int, int]
    new_counts: dict[int, int]
    survivors: dict[int, tuple[int, ...]] = field(default_factory=dict)


def _is_prunable(spec) -> bool:
    return isinstance(spec, (Conv2D, Linear))


def _out_width(spec) -> int:
    return spec.out_channels if isinstance(spec, Conv2D) else spec.out_features


def layer_sparsity(params: dict, layer_index: int) -> float:
    """Fraction of exact zeros in a layer's kernel weights (biases excluded)."""
    key = weight_key(layer_index)
    if key not in params:
        raise ValueError(f"layer {layer_index} is not parameterized")
    w = params[key]
    return float((w == 0).sum() / w.size)


def block_sparsity(params: dict, block: Block) -> float:
    """Pooled zero ratio over all kernels in a block (element-weighted)."""
    zeros = 0
    total = 0
    for idx in block.layers:
        key = weight_key(idx)
        if key in params:
            w = params[key]
            zeros += int((w == 0).sum())
            total += w.size
    if total == 0:
        raise ValueError(f"block {block.layers} has no parameterized layers")
    return zeros / total


def overall_sparsity(params: dict) -> float:
    weights = [v for k, v in params.items() if k.endswith(".weight")]
    if not weights:
        return 0.0
    return float(sum(int((w == 0).sum()) for w in weights) / sum(w.size for w in weights))


def pruning_units(arch: Architecture, config: CompressionConfig) -> tuple[PruningUnit, ...]:
    units = []
    if config.unit_mode == PER_LAYER:
        for i, spec in enumerate(arch.layers):
            if _is_prunable(spec):
                units.append(PruningUnit((i,)))
    else:
        for block in arch.blocks:
            members = tuple(i for i in block.layers if _is_prunable(arch.layers[i]))
            if members:
                units.append(PruningUnit(members, residual=block.residual))
    return tuple(units)


def compute_profile(arch, params, config) -> SparsityProfile:
    ratios = []
    for unit in pruning_units(arch, config):
        if len(unit.layers) == 1:
            ratios.append(layer_sparsity(params, unit.layers[0]))
        else:
            ratios.append(block_sparsity(params, Block(unit.layers, residual=unit.residual)))
    return SparsityProfile(tuple(ratios))


def _ceil_shrink(width: int, sparsity: float, epsilon: float) -> int:
    # tiny guard so float artifacts cannot bump an exact integer product up
    kept = max(1.0 - sparsity, epsilon)
    return max(1, math.ceil(width * kept - 1e-9))


def make_shrink_plan(arch: Architecture, profile: SparsityProfile, config: CompressionConfig) -> ShrinkPlan:
    """New width per prunable layer, driven by the downstream unit's sparsity.

    The last prunable unit (there is no downstream sparsity) and the
    classifier output are never shrunk. Layers feeding a residual block keep
    their width so the skip-add stays valid; inside a residual block the
    non-final members shrink by the block's own pooled ratio.
    """
    units = pruning_units(arch, config)
    if len(profile.ratios) != len(units):
        raise ValueError(
            f"profile covers {len(profile.ratios)} units, architecture has {len(units)}"
        )
    old_counts: dict[int, int] = {}
    new_counts: dict[int, int] = {}
    for i, unit in enumerate(units):
        for idx in unit.layers:
            spec = arch.layers[idx]
            old_counts[idx] = _out_width(spec)
            new_counts[idx] = old_counts[idx]
        if unit.residual:
            for idx in unit.layers[:-1]:
                spec = arch.layers[idx]
                if isinstance(spec, Linear) and not config.shrink_linear_layers:
                    continue
                new_counts[idx] = _ceil_shrink(old_counts[idx], profile.ratios[i], config.epsilon)
        else:
            idx = unit.layers[0]
            spec = arch.layers[idx]
            if i == len(units) - 1:
                continue
            if isinstance(spec, Linear) and not config.shrink_linear_layers:
                continue
            if units[i + 1].residual:
                continue
            new_counts[idx] = _ceil_shrink(old_counts[idx], profile.ratios[i + 1], config.epsilon)
    for idx, new in new_counts.items():
        floor = math.ceil(config.epsilon * old_counts[idx] - 1e-9)
        assert floor <= new <= old_counts[idx], (idx, floor, new, old_counts[idx])
    return ShrinkPlan(old_counts, new_counts)


def select_survivors(params: dict, plan: ShrinkPlan) -> ShrinkPlan:
    """Keep the filters with the largest row L1 norm; ties go to lower indices."""
    for idx, new_count in plan.new_counts.items():
        plan.survivors[idx] = _top_rows(params[weight_key(idx)], new_count)
    return plan


def _top_rows(w: np.ndarray, k: int) -> tuple[int, ...]:
    mat = flatten_kernel_matrix(w) if w.ndim == 4 else w
    norms = np.abs(mat).sum(axis=1)
    order = np.argsort(-norms, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def apply_counts(arch: Architecture, plan: ShrinkPlan) -> Architecture:
    """Apply planned output widths; input widths are fixed up by calibrate."""
    layers = list(arch.layers)
    for idx, new in plan.new_counts.items():
        spec = layers[idx]
        if isinstance(spec, Conv2D):
            layers[idx] = replace(spec, out_channels=new)
        else:
            layers[idx] = replace(spec, out_features=new)
    return Architecture(arch.input_shape, tuple(layers), arch.blocks)


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------


def _last_prunable(layers, block: Block):
    for idx in reversed(block.layers):
        if _is_prunable(layers[idx]):
            return idx
    return None


def _calibrate_pass(input_shape, layers, blocks) -> bool:
    changed = False
    shape: tuple[int, ...] = tuple(input_shape)
    producer = None  # layer index that produced the current channel width
    for block in blocks:
        entry_shape, entry_producer = shape, producer
        for idx in block.layers:
            spec = layers[idx]
            if isinstance(spec, Conv2D):
                if len(shape) != 3:
                    raise ShapeError(f"layer {idx}: conv applied to non-spatial shape {shape}")
                if spec.in_channels != shape[0]:
                    spec = replace(spec, in_channels=shape[0])
                    layers[idx] = spec
                    changed = True
                ho = (shape[1] + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
                wo = (shape[2] + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {idx}: non-positive conv output extent")
                shape = (spec.out_channels, ho, wo)
                producer = idx
            elif isinstance(spec, Linear):
                if len(shape) != 1:
                    raise ShapeError(f"layer {idx}: linear applied to non-flat shape {shape}")
                if spec.in_features != shape[0]:
                    spec = replace(spec, in_features=shape[0])
                    layers[idx] = spec
                    changed = True
                shape = (spec.out_features,)
                producer = idx
            else:
                shape = _shape_through(shape, spec, idx)
                if spec.kind == "flatten":
                    producer = None  # feature widths derive from spatial dims; not widenable
        if block.residual:
            if len(shape) != 3 or len(entry_shape) != 3:
                raise ShapeError(f"residual block {block.layers}: branches are not spatial tensors")
            if shape[1:] != entry_shape[1:]:
                raise ShapeError(
                    f"residual block {block.layers}: spatial dims {shape[1:]} vs {entry_shape[1:]} cannot be calibrated"
                )
            if shape[0] != entry_shape[0]:
                target = max(shape[0], entry_shape[0])
                if shape[0] < target:
                    last = _last_prunable(layers, block)
                    if last is None or not isinstance(layers[last], Conv2D):
                        raise ShapeError(f"residual block {block.layers}: no conv to widen to {target}")
                    layers[last] = replace(layers[last], out_channels=target)
                    changed = True
                if entry_shape[0] < target:
                    if entry_producer is None:
                        raise ShapeError(
                            f"residual block {block.layers}: cannot widen the network input to {target}"
                        )
                    prod_spec = layers[entry_producer]
                    if isinstance(prod_spec, Conv2D):
                        layers[entry_producer] = replace(prod_spec, out_channels=target)
                    else:
                        layers[entry_producer] = replace(prod_spec, out_features=target)
                    changed = True
                shape = (target, shape[1], shape[2])
    return changed


def _shape_through(shape, spec, idx):
    # ReLU / MaxPool2D / Flatten shape propagation with layer-named errors
    if spec.kind == "relu":
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "maxpool2d":
        if len(shape) != 3:
            raise ShapeError(f"layer {idx}: pooling applied to non-spatial shape {shape}")
        ho = (shape[1] - spec.window) // spec.stride + 1
        wo = (shape[2] - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {idx}: non-positive pool output extent")
        return (shape[0], ho, wo)
    raise ShapeError(f"layer {idx}: unknown spec {spec!r}")


def calibrate(candidate: Architecture) -> Architecture:
    """Make channel/feature counts consistent along every path.

    Conv chains take their input width from the producing layer, linear
    in_features are recomputed after flatten, and residual branches are
    forced to the max of the two branch widths. Returns the input unchanged
    when it is already consistent.
    """
    layers = list(candidate.layers)
    for _ in range(len(layers) + len(candidate.blocks) + 4):
        if not _calibrate_pass(candidate.input_shape, layers, candidate.blocks):
            break
    else:
        raise ShapeError("calibration did not reach a fixed point")
    if tuple(layers) == candidate.layers:
        return candidate
    out = Architecture(candidate.input_shape, tuple(layers), candidate.blocks)
    infer_shapes(out)
    return out


# --------------------------------------------------------------------------
# Survivor weight extraction
# --------------------------------------------------------------------------


def extract_survivor_params(
    arch_old: Architecture, params: dict, plan: ShrinkPlan, arch_new: Architecture
) -> dict:
    """Slice old weights down to survivors, restricting incoming slices to the
    upstream layer's survivors (channels expand across spatial positions at
    flatten)."""
    shapes_old = infer_shapes(arch_old)
    new_params: dict[str, np.ndarray] = {}
    keep = np.arange(arch_old.input_shape[0])  # indices into the old width of the flowing tensor
    entry_keep = None
    for block in arch_old.blocks:
        entry_keep = keep
        for pos, idx in enumerate(block.layers):
            spec_old = arch_old.layers[idx]
            spec_new = arch_new.layers[idx]
            if isinstance(spec_old, Conv2D):
                rows = np.array(plan.survivors.get(idx, range(spec_old.out_channels)))
                if len(rows) != spec_new.out_channels:
                    rows = np.array(_top_rows(params[weight_key(idx)], spec_new.out_channels))
                new_params[weight_key(idx)] = params[weight_key(idx)][rows][:, keep]
                new_params[bias_key(idx)] = params[bias_key(idx)][rows]
                keep = rows
            elif isinstance(spec_old, Linear):
                rows = np.array(plan.survivors.get(idx, range(spec_old.out_features)))
                if len(rows) != spec_new.out_features:
                    rows = np.array(_top_rows(params[weight_key(idx)], spec_new.out_features))
                new_params[weight_key(idx)] = params[weight_key(idx)][rows][:, keep]
                new_params[bias_key(idx)] = params[bias_key(idx)][rows]
                keep = rows
            elif spec_old.kind == "flatten":
                shape_here = shapes_old[idx]
                spatial = int(np.prod(shape_here[1:])) if len(shape_here) == 3 else 1
                keep = (keep[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)
        if block.residual:
            # skip-add: keep the identity branch's channel identities
            if len(keep) != len(entry_keep):
                raise ShapeError(
                    f"residual block {block.layers}: branch widths {len(keep)} vs {len(entry_keep)} after extraction"
                )
            keep = entry_keep
    validate_params(arch_new, new_params)
    return new_params


def compress_model(arch: Architecture, params: dict, config: CompressionConfig):
    """Full compression step: profile, shrink, calibrate, select survivors.

    Returns (new_arch, new_params, profile, plan); plan reflects the
    calibrated widths.
    """
    profile = compute_profile(arch, params, config)
    plan = make_shrink_plan(arch, profile, config)
    new_arch = calibrate(apply_counts(arch, plan))
    for idx in plan.new_counts:
        plan.new_counts[idx] = _out_width(new_arch.layers[idx])
    select_survivors(params, plan)
    new_params = extract_survivor_params(arch, params, plan, new_arch)
    return new_arch, new_params, profile, plan


# --------------------------------------------------------------------------
# Accounting
# --------------------------------------------------------------------------


def count_params(arch: Architecture) -> int:
    total = 0
    for spec in arch.layers:
        if isinstance(spec, Conv2D):
            total += spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w + spec.out_channels
        elif isinstance(spec, Linear):
            total += spec.out_features * spec.in_features + spec.out_features
    return total


def count_flops(arch: Architecture) -> int:
    shapes = infer_shapes(arch)
    total = 0
    for i, spec in enumerate(arch.layers):
        if isinstance(spec, Conv2D):
            _, h, w = shapes[i]
            ho = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
            wo = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
            total += 2 * spec.in_channels * spec.kernel_h * spec.kernel_w * ho * wo * spec.out_channels
        elif isinstance(spec, Linear):
            total += 2 * spec.in_features * spec.out_features
    return total


def compression_ratio(base: Architecture, pruned: Architecture) -> float:
    return count_params(base) / count_params(pruned)


def flops_speedup(base: Architecture, pruned: Architecture) -> float:
    return count_flops(base) / count_flops(pruned)


def layer_widths(arch: Architecture) -> list[int]:
    """Output widths of prunable layers in order (conv first, then linear)."""
    return [_out_width(spec) for spec in arch.layers if _is_prunable(spec)]
