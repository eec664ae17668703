"""Minimal CNN engine: layer specs, shape inference, deterministic forward/backward.

Everything is plain numpy. Parameters and activations default to float32;
loss values and softmax statistics are reduced in float64. All functions are
pure: no layer objects, no hidden state. A network is an ``Architecture``
(layer specs grouped into building blocks) plus a parameter dict mapping
``"{layer_index}.weight"`` / ``"{layer_index}.bias"`` to arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float32

__all__ = [
    "DTYPE",
    "ShapeError",
    "NumericError",
    "Conv2D",
    "Linear",
    "ReLU",
    "MaxPool2D",
    "Flatten",
    "LayerSpec",
    "Block",
    "Architecture",
    "arch_to_dict",
    "arch_from_dict",
    "param_shapes",
    "init_params",
    "validate_params",
    "conv2d_forward",
    "flatten_kernel_matrix",
    "model_forward",
    "model_backward",
    "softmax_cross_entropy",
    "predict",
    "accuracy",
]


class ShapeError(ValueError):
    """Architecture/tensor shapes are inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during evaluation."""


# --------------------------------------------------------------------------
# Layer specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    kind = "conv2d"

    def __post_init__(self):
        if min(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w) < 1:
            raise ShapeError(f"conv extents must be >= 1, got {self}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding in {self}")


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int

    kind = "linear"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ShapeError(f"linear extents must be >= 1, got {self}")


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool2D:
    window: int
    stride: int

    kind = "maxpool2d"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ShapeError(f"bad pooling spec {self}")


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


LayerSpec = Union[Conv2D, Linear, ReLU, MaxPool2D, Flatten]

_LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Linear, ReLU, MaxPool2D, Flatten)}


@dataclass(frozen=True)
class Block:
    """A building block: one or more consecutive layer indices.

    Plain layers live in singleton blocks. A residual block wraps its member
    layers and adds the block input to the member-chain output, so its entry
    and exit shapes must agree.
    """

    layers: tuple[int, ...]
    residual: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("block must contain at least one layer")
        if list(self.layers) != sorted(set(self.layers)):
            raise ShapeError(f"block layers must be unique and ascending: {self.layers}")


@dataclass(frozen=True)
class Architecture:
    """Ordered layer specs plus the block grouping used for pruning units."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    blocks: tuple[Block, ...]

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (channels, height, width) >= 1, got {self.input_shape}")
        covered = [i for b in self.blocks for i in b.layers]
        if covered != list(range(len(self.layers))):
            raise ShapeError("blocks must cover every layer index exactly once, in order")

    @classmethod
    def plain(cls, input_shape, layers) -> "Architecture":
        """Build an architecture where every layer is its own singleton block."""
        layers = tuple(layers)
        blocks = tuple(Block(layers=(i,)) for i in range(len(layers)))
        return cls(tuple(input_shape), layers, blocks)

    def block_of(self, layer_index: int) -> int:
        for bi, b in enumerate(self.blocks):
            if layer_index in b.layers:
                return bi
        raise ShapeError(f"layer {layer_index} not in any block")

    def validate(self) -> tuple[int, ...]:
        """Check shape compatibility; returns the final output shape."""
        shapes = infer_shapes(self)
        return shapes[-1]


def _conv_out_hw(h: int, w: int, spec: Conv2D) -> tuple[int, int]:
    ho = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
    wo = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
    return ho, wo


def _layer_out_shape(shape: tuple[int, ...], spec: LayerSpec, idx: int) -> tuple[int, ...]:
    if isinstance(spec, Conv2D):
        if len(shape) != 3:
            raise ShapeError(f"layer {idx}: conv needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        if c != spec.in_channels:
            raise ShapeError(f"layer {idx}: conv expects {spec.in_channels} channels, got {c}")
        ho, wo = _conv_out_hw(h, w, spec)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {idx}: non-positive conv output extent ({ho}x{wo})")
        return (spec.out_channels, ho, wo)
    if isinstance(spec, Linear):
        if len(shape) != 1:
            raise ShapeError(f"layer {idx}: linear needs a flat input, got {shape}")
        if shape[0] != spec.in_features:
            raise ShapeError(f"layer {idx}: linear expects {spec.in_features} features, got {shape[0]}")
        return (spec.out_features,)
    if isinstance(spec, MaxPool2D):
        if len(shape) != 3:
            raise ShapeError(f"layer {idx}: pooling needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        ho = (h - spec.window) // spec.stride + 1
        wo = (w - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {idx}: non-positive pool output extent ({ho}x{wo})")
        return (c, ho, wo)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(spec, ReLU):
        return shape
    raise ShapeError(f"layer {idx}: unknown layer spec {spec!r}")


def infer_shapes(arch: Architecture) -> list[tuple[int, ...]]:
    """Per-layer input shapes followed by the final output shape.

    Raises ShapeError on the first inconsistency, naming the layer. Residual
    blocks additionally require exit shape == entry shape.
    """
    shapes = []
    shape: tuple[int, ...] = tuple(arch.input_shape)
    for block in arch.blocks:
        entry = shape
        for idx in block.layers:
            shapes.append(shape)
            shape = _layer_out_shape(shape, arch.layers[idx], idx)
        if block.residual and shape != entry:
            raise ShapeError(
                f"residual block {block.layers}: exit shape {shape} != entry shape {entry}"
            )
    shapes.append(shape)
    return shapes


def class_count(arch: Architecture) -> int:
    out = infer_shapes(arch)[-1]
    flat = int(np.prod(out))
    return flat


# --------------------------------------------------------------------------
# Architecture (de)serialization
# --------------------------------------------------------------------------


def arch_to_dict(arch: Architecture) -> dict:
    layers = []
    for spec in arch.layers:
        d = {"kind": spec.kind}
        for f in getattr(spec, "__dataclass_fields__", {}):
            d[f] = getattr(spec, f)
        layers.append(d)
    return {
        "input_shape": list(arch.input_shape),
        "layers": layers,
        "blocks": [{"layers": list(b.layers), "residual": b.residual} for b in arch.blocks],
    }


def arch_from_dict(d: dict) -> Architecture:
    layers = []
    for entry in d["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind not in _LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {kind!r}")
        layers.append(_LAYER_KINDS[kind](**entry))
    blocks = tuple(Block(tuple(b["layers"]), bool(b.get("residual", False))) for b in d["blocks"])
    return Architecture(tuple(d["input_shape"]), tuple(layers), blocks)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def weight_key(idx: int) -> str:
    return f"{idx}.weight"


def bias_key(idx: int) -> str:
    return f"{idx}.bias"


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, spec in enumerate(arch.layers):
        if isinstance(spec, Conv2D):
            shapes[weight_key(i)] = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
            shapes[bias_key(i)] = (spec.out_channels,)
        elif isinstance(spec, Linear):
            shapes[weight_key(i)] = (spec.out_features, spec.in_features)
            shapes[bias_key(i)] = (spec.out_features,)
    return shapes


def init_params(arch: Architecture, seed: int, dtype=DTYPE) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for i, spec in enumerate(arch.layers):
        if isinstance(spec, Conv2D):
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        elif isinstance(spec, Linear):
            fan_in = spec.in_features
            shape = (spec.out_features, spec.in_features)
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        params[weight_key(i)] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[bias_key(i)] = np.zeros(shape[0], dtype=dtype)
    return params


def validate_params(arch: Architecture, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(arch)
    for key, shape in expected.items():
        if key not in params:
            raise ShapeError(f"missing parameter {key!r}")
        if tuple(params[key].shape) != shape:
            raise ShapeError(f"parameter {key!r} has shape {params[key].shape}, expected {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ShapeError(f"unexpected parameter entries: {sorted(extra)}")


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(B,C,H,W) -> (cols of shape (B, C*kh*kw, Ho*Wo), padded input shape)."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = windows.reshape(b, c * kh * kw, ho * wo)
    return cols, x.shape, (ho, wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    x = np.zeros(padded_shape, dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    return x


def conv2d_forward(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of a (C,H,W) or (B,C,H,W) input with a (K,C,kh,kw) kernel.

    Output extents are floor((H + 2*padding - kh)/stride) + 1 and must be >= 1.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-d (K,C,kh,kw), got rank {kernel.ndim}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be (C,H,W) or (B,C,H,W), got rank {x.ndim}")
    k, c, kh, kw = kernel.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive conv output extent ({ho}x{wo})")
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (k,):
            raise ShapeError(f"bias must have shape ({k},), got {bias.shape}")
    cols, _, (ho, wo) = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(kernel.reshape(k, -1), cols).reshape(x.shape[0], k, ho, wo)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out[0] if single else out


def flatten_kernel_matrix(kernel) -> np.ndarray:
    """Reshape a (K,C,H,W) kernel into a K x (C*H*W) matrix, rows in row-major order."""
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-d, got rank {kernel.ndim}")
    return kernel.reshape(kernel.shape[0], -1)


# --------------------------------------------------------------------------
# Whole-model forward / backward
# --------------------------------------------------------------------------


def _forward(arch, params, x, caches):
    """Run all blocks; if caches is a list it receives per-layer backward context."""
    record = caches is not None
    for block in arch.blocks:
        x_entry = x
        for idx in block.layers:
            spec = arch.layers[idx]
            if isinstance(spec, Conv2D):
                w = params[weight_key(idx)]
                b = params[bias_key(idx)]
                cols, padded_shape, (ho, wo) = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
                x = np.matmul(w.reshape(spec.out_channels, -1), cols)
                x = x.reshape(x.shape[0], spec.out_channels, ho, wo) + b[None, :, None, None]
                if record:
                    caches.append((idx, "conv2d", (cols, padded_shape)))
            elif isinstance(spec, Linear):
                w = params[weight_key(idx)]
                b = params[bias_key(idx)]
                inp = x
                x = inp @ w.T + b
                if record:
                    caches.append((idx, "linear", inp))
            elif isinstance(spec, ReLU):
                inp = x
                x = np.maximum(inp, 0)
                if record:
                    caches.append((idx, "relu", inp))
            elif isinstance(spec, MaxPool2D):
                out, argidx, in_shape = _maxpool_forward(x, spec.window, spec.stride)
                if record:
                    caches.append((idx, "maxpool2d", (argidx, in_shape)))
                x = out
            elif isinstance(spec, Flatten):
                in_shape = x.shape
                x = x.reshape(x.shape[0], -1)
                if record:
                    caches.append((idx, "flatten", in_shape))
            _check_finite(x, f"output of layer {idx} ({spec.kind})")
        if block.residual:
            x = x + x_entry
            if record:
                caches.append((None, "residual_add", None))
    return x


def _maxpool_forward(x, window, stride):
    b, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    sb, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(b, c, ho, wo, window, window),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = win.reshape(b, c, ho, wo, window * window)
    argidx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argidx[..., None], axis=-1)[..., 0]
    return out, argidx, x.shape


def _maxpool_backward(grad, argidx, in_shape, window, stride):
    b, c, h, w = in_shape
    _, _, ho, wo = grad.shape
    gx = np.zeros(in_shape, dtype=grad.dtype).reshape(-1)
    dh = argidx // window
    dw = argidx % window
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    hp = np.arange(ho)[None, None, :, None] * stride + dh
    wp = np.arange(wo)[None, None, None, :] * stride + dw
    flat_idx = ((bi * c + ci) * h + hp) * w + wp
    np.add.at(gx, flat_idx.reshape(-1), grad.reshape(-1))
    return gx.reshape(in_shape)


def _as_logits(x):
    if x.ndim == 2:
        return x
    if x.ndim == 4 and x.shape[2] == x.shape[3] == 1:
        return x.reshape(x.shape[0], x.shape[1])
    raise ShapeError(f"network output of shape {x.shape} is not a logits matrix")


def model_forward(arch: Architecture, params: dict, batch) -> np.ndarray:
    """Pure forward pass; returns (batch, class_count) logits."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape} does not match input shape {arch.input_shape} with leading batch extent"
        )
    infer_shapes(arch)
    validate_params(arch, params)
    out = _forward(arch, params, batch, caches=None)
    return _as_logits(out)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy in float64; returns (loss, dloss/dlogits)."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch extent {n}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


def model_backward(arch: Architecture, params: dict, batch, labels):
    """Loss plus gradients with the same keys/shapes as ``params``.

    Loss is mean softmax cross-entropy over the batch. Raises NumericError
    (naming the layer) on non-finite intermediates.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape} does not match input shape {arch.input_shape} with leading batch extent"
        )
    infer_shapes(arch)
    validate_params(arch, params)
    caches: list = []
    out = _forward(arch, params, batch, caches)
    logits = _as_logits(out)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grad = dlogits.reshape(out.shape)

    residual_skips: list[np.ndarray] = []
    for entry in reversed(caches):
        idx, kind, ctx = entry
        if kind == "residual_add":
            residual_skips.append(grad)
            continue
        spec = arch.layers[idx]
        if kind == "conv2d":
            cols, padded_shape = ctx
            k = spec.out_channels
            go = grad.reshape(grad.shape[0], k, -1)
            grads[bias_key(idx)] += go.sum(axis=(0, 2))
            gw = np.einsum("bkn,bcn->kc", go, cols)
            grads[weight_key(idx)] += gw.reshape(params[weight_key(idx)].shape)
            gcols = np.matmul(params[weight_key(idx)].reshape(k, -1).T, go)
            gx = _col2im(gcols, padded_shape, spec.kernel_h, spec.kernel_w, spec.stride)
            p = spec.padding
            if p > 0:
                gx = gx[:, :, p:-p, p:-p]
            grad = gx
        elif kind == "linear":
            inp = ctx
            grads[weight_key(idx)] += grad.T @ inp
            grads[bias_key(idx)] += grad.sum(axis=0)
            grad = grad @ params[weight_key(idx)]
        elif kind == "relu":
            grad = grad * (ctx > 0)
        elif kind == "maxpool2d":
            argidx, in_shape = ctx
            grad = _maxpool_backward(grad, argidx, in_shape, spec.window, spec.stride)
        elif kind == "flatten":
            grad = grad.reshape(ctx)
        _check_finite(grad, f"gradient at layer {idx} ({kind})")
        # entering a residual block from its first member: add the skip gradient
        block = arch.blocks[arch.block_of(idx)]
        if block.residual and idx == block.layers[0]:
            grad = grad + residual_skips.pop()
    return loss, grads


# --------------------------------------------------------------------------
# Evaluation helpers
# --------------------------------------------------------------------------


def iter_batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def predict(arch, params, images, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(images), dtype=np.int64)
    for sl in iter_batches(len(images), batch_size):
        logits = model_forward(arch, params, images[sl])
        preds[sl] = logits.argmax(axis=1)
    return preds


def accuracy(arch, params, images, labels, batch_size: int = 256) -> float:
    return float((predict(arch, params, images, batch_size) == np.asarray(labels)).mean())
