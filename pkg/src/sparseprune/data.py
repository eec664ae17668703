"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic) and checkpoint files.

Loaders are pure functions of file bytes. Images are float32 in [0, 1] with
shape (N, C, H, W); labels are int64 class indices. Checkpoints use a small
binary format: magic ``RSPC``, a little-endian uint32 version, a
length-prefixed UTF-8 JSON header (architecture + training metadata), then
one record per parameter (length-prefixed name, dtype code byte, rank and
extents as little-endian uint64, raw little-endian float32 data).
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import Architecture, arch_from_dict, arch_to_dict, validate_params

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

CHECKPOINT_MAGIC = b"RSPC"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


class DataFormatError(ValueError):
    """Input file does not follow the documented byte format."""


@dataclass(frozen=True)
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N,C,H,W), got shape {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise DataFormatError("image/label count mismatch")

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class DatasetHandle:
    train: Split
    validation: Split
    test: Split
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            labels = getattr(self, name).labels
            if len(labels) and labels.max() >= self.class_count:
                raise DataFormatError(f"{name} labels exceed class count {self.class_count}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])


# --------------------------------------------------------------------------
# IDX / CIFAR loaders
# --------------------------------------------------------------------------


def _open_binary(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(
            f"truncated file while reading {what}: expected {n} bytes at offset {offset}, got {len(data)}"
        )
    return data


def load_mnist_idx(images_path, labels_path) -> Split:
    """Load an IDX image/label file pair (optionally gzipped)."""
    with _open_binary(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, 0, "image header"))
        if magic != MNIST_IMAGE_MAGIC:
            raise DataFormatError(f"bad image magic 0x{magic:08x} at offset 0, expected 0x{MNIST_IMAGE_MAGIC:08x}")
        payload = _read_exact(f, count * rows * cols, 16, "image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    with _open_binary(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, 0, "label header"))
        if magic != MNIST_LABEL_MAGIC:
            raise DataFormatError(f"bad label magic 0x{magic:08x} at offset 0, expected 0x{MNIST_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, 8, "label payload"), dtype=np.uint8)
    if count != label_count:
        raise DataFormatError(f"image/label count mismatch: {count} images vs {label_count} labels")
    return Split(images.astype(np.float32) / 255.0, labels.astype(np.int64))


def load_cifar10_bin(batch_paths) -> Split:
    """Load CIFAR-10 binary batches (1 label byte + 3072 RGB-plane bytes per record)."""
    images = []
    labels = []
    for path in batch_paths:
        with _open_binary(path) as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: file length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"label byte {labels.max()} outside 0..9")
    return Split(np.concatenate(images).astype(np.float32) / 255.0, labels)


def split_train_validation(split: Split, fraction: float, seed: int) -> tuple[Split, Split]:
    """Deterministically carve a validation subset from a training split."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"validation fraction must be in [0, 1), got {fraction}")
    n = len(split)
    n_val = int(round(n * fraction))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return (
        Split(split.images[train_idx], split.labels[train_idx]),
        Split(split.images[val_idx], split.labels[val_idx]),
    )


def make_dataset(train: Split, test: Split, class_count: int, val_fraction: float = 0.1,
                 seed: int = 0, provenance: str = "") -> DatasetHandle:
    tr, val = split_train_validation(train, val_fraction, seed)
    return DatasetHandle(tr, val, test, class_count, provenance)


# --------------------------------------------------------------------------
# Synthetic planted-redundancy generator
# --------------------------------------------------------------------------


def synth_redundant(
    seed: int,
    n_samples: int,
    n_informative_channels: int,
    n_noise_channels: int,
    class_count: int,
    image_size: int = 8,
    noise_scale: float = 0.1,
    test_samples: int | None = None,
    val_fraction: float = 0.1,
) -> DatasetHandle:
    """Class-separated bright blobs on informative channels, pure noise elsewhere.

    Labels are assigned round-robin. Per-class mean images are dark except
    for a class-specific bright patch pattern (MNIST-like statistics), so a
    nearest-class-mean rule on the informative channels is near-perfect by
    construction; noise channels are class-independent.
    """
    if min(n_samples, n_informative_channels, class_count) < 1 or n_noise_channels < 0:
        raise ValueError("counts must be >= 1 (noise channels >= 0)")
    rng = np.random.default_rng(seed)
    hw = image_size
    bright = rng.uniform(0.6, 1.0, size=(class_count, n_informative_channels, hw, hw))
    lit = rng.random((class_count, n_informative_channels, hw, hw)) < 0.35
    means = np.where(lit, bright, 0.0)

    def draw(n: int) -> Split:
        labels = np.arange(n, dtype=np.int64) % class_count
        informative = means[labels] + noise_scale * rng.standard_normal((n, n_informative_channels, hw, hw))
        noise = np.abs(noise_scale * 1.5 * rng.standard_normal((n, n_noise_channels, hw, hw)))
        images = np.concatenate([informative, noise], axis=1) if n_noise_channels else informative
        return Split(np.clip(images, 0.0, 1.0).astype(np.float32), labels)

    train = draw(n_samples)
    test = draw(test_samples if test_samples is not None else max(200, n_samples // 5))
    provenance = (
        f"synth_redundant(seed={seed}, n={n_samples}, informative={n_informative_channels}, "
        f"noise={n_noise_channels}, classes={class_count}, size={image_size})"
    )
    return make_dataset(train, test, class_count, val_fraction, seed, provenance)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class CheckpointValidationError(CheckpointError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    arch: Architecture
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    try:
        validate_params(ckpt.arch, ckpt.params)
    except ValueError as exc:
        raise CheckpointValidationError(str(exc)) from exc
    header = json.dumps(
        {"architecture": arch_to_dict(ckpt.arch), "metadata": ckpt.metadata},
        sort_keys=True,
    ).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(header)), header]
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint v1 stores float32 only; {name!r} is {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", _DTYPE_F32))
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.extend(struct.pack("<Q", extent) for extent in arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncationError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.offset}, "
                f"have {len(self.data) - self.offset}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        reader = _Reader(f.read())
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise MagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", reader.take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack("<I", reader.take(4, "header length"))
    header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    arch = arch_from_dict(header["architecture"])
    params: dict[str, np.ndarray] = {}
    while not reader.exhausted:
        (name_len,) = struct.unpack("<I", reader.take(4, "parameter name length"))
        name = reader.take(name_len, "parameter name").decode("utf-8")
        (dtype_code,) = struct.unpack("<B", reader.take(1, f"{name} dtype"))
        if dtype_code != _DTYPE_F32:
            raise CheckpointValidationError(f"unknown dtype code {dtype_code} for {name!r}")
        (rank,) = struct.unpack("<Q", reader.take(8, f"{name} rank"))
        shape = tuple(
            struct.unpack("<Q", reader.take(8, f"{name} extent {i}"))[0] for i in range(rank)
        )
        n_values = int(np.prod(shape)) if shape else 1
        raw = reader.take(4 * n_values, f"{name} data")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    ckpt = Checkpoint(arch, params, header.get("metadata", {}), version)
    try:
        validate_params(arch, params)
    except ValueError as exc:
        raise CheckpointValidationError(str(exc)) from exc
    return ckpt
