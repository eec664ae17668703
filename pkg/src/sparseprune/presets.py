"""Architecture presets, sized at build time to the dataset's input shape."""

from __future__ import annotations

import numpy as np

from .nn import Architecture, Block, Conv2D, Flatten, Linear, MaxPool2D, ReLU, infer_shapes

PRESETS = ("lenet-small", "vgg-tiny", "resnet-tiny")

__all__ = ["PRESETS", "make_preset"]


def _flat_dim(input_shape, layers) -> int:
    probe = Architecture.plain(input_shape, layers)
    return int(np.prod(infer_shapes(probe)[-1]))


def _lenet_small(input_shape, classes):
    c = input_shape[0]
    layers = [
        Conv2D(8, c, 3, 3, 1, 1),
        ReLU(),
        MaxPool2D(2, 2),
        Conv2D(16, 8, 3, 3, 1, 1),
        ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
    ]
    flat = _flat_dim(input_shape, layers)
    layers += [Linear(flat, 64), ReLU(), Linear(64, classes)]
    return Architecture.plain(input_shape, layers)


def _vgg_tiny(input_shape, classes):
    c = input_shape[0]
    layers = []
    for pair, width in enumerate((16, 32, 64)):
        layers += [Conv2D(width, c, 3, 3, 1, 1), ReLU(), Conv2D(width, width, 3, 3, 1, 1), ReLU()]
        layers.append(MaxPool2D(2, 2))
        c = width
    layers.append(Flatten())
    flat = _flat_dim(input_shape, layers)
    layers += [Linear(flat, 128), ReLU(), Linear(128, classes)]
    return Architecture.plain(input_shape, layers)


def _resnet_tiny(input_shape, classes, width=16, bottleneck=8, n_blocks=3):
    c = input_shape[0]
    layers = [Conv2D(width, c, 3, 3, 1, 1), ReLU(), MaxPool2D(2, 2)]
    blocks = [Block((0,)), Block((1,)), Block((2,))]
    for _ in range(n_blocks):
        i0 = len(layers)
        layers += [Conv2D(bottleneck, width, 3, 3, 1, 1), ReLU(), Conv2D(width, bottleneck, 3, 3, 1, 1)]
        blocks.append(Block((i0, i0 + 1, i0 + 2), residual=True))
        layers.append(ReLU())
        blocks.append(Block((len(layers) - 1,)))
    i0 = len(layers)
    flat = _flat_dim(input_shape, layers + [Flatten()])
    layers += [Flatten(), Linear(flat, classes)]
    blocks += [Block((i0,)), Block((i0 + 1,))]
    return Architecture(tuple(input_shape), tuple(layers), tuple(blocks))


def make_preset(name: str, input_shape, class_count: int) -> Architecture:
    if name == "lenet-small":
        return _lenet_small(tuple(input_shape), class_count)
    if name == "vgg-tiny":
        return _vgg_tiny(tuple(input_shape), class_count)
    if name == "resnet-tiny":
        return _resnet_tiny(tuple(input_shape), class_count)
    raise ValueError(f"unknown architecture preset {name!r}; available: {', '.join(PRESETS)}")
