"""Structural filter pruning for small CNNs driven by L1 sparse training."""

from .compress import (
    CompressionConfig,
    ShrinkPlan,
    SparsityProfile,
    compress_model,
    compression_ratio,
    count_flops,
    count_params,
    flops_speedup,
)
from .data import Checkpoint, DatasetHandle, Split, load_checkpoint, save_checkpoint, synth_redundant
from .driver import CompressionHistory, RoundRecord, RunConfig, fine_tune, run_compression
from .nn import Architecture, Block, Conv2D, Flatten, Linear, MaxPool2D, ReLU
from .optim import LRSchedule, SwitchSchedule, evaluate_objective, soft_threshold, sparse_train
from .presets import PRESETS, make_preset

__version__ = "0.1.0"
