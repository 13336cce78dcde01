"""Dataset ingestion, deterministic transforms and Sobel preprocessing.

Supported on-disk formats:

* IDX (MNIST / Fashion-MNIST): ``00 00 08 03`` image files and
  ``00 00 08 01`` label files, big-endian u32 dimensions, raw u8 payload.
  Gzipped files are accepted transparently.
* Raw NCHW u8 (CIFAR10 / SVHN style): ``<split>_images.u8`` holding
  N*C*H*W bytes plus a sidecar ``<split>_labels.u8`` with one byte per image.
"""
from __future__ import annotations

import enum
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError, DatasetNotFoundError

IDX_IMAGES_MAGIC = b"\x00\x00\x08\x03"
IDX_LABELS_MAGIC = b"\x00\x00\x08\x01"
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Phase(str, enum.Enum):
    CLUSTER = "cluster"
    TRAIN = "train"


@dataclass
class ImageDataset:
    images: np.ndarray  # N x C x H x W, uint8
    labels: np.ndarray | None = None
    class_count: int | None = None
    split: Split = Split.TRAIN
    name: str = ""

    def __post_init__(self):
        self.split = Split(self.split)
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataFormatError(f"images must be an N x C x H x W uint8 array, got {self.images.dtype} {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataFormatError(f"{len(self.labels)} labels for {len(self.images)} images")
            if self.class_count is None:
                self.class_count = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(
            self.images[indices],
            None if self.labels is None else self.labels[indices],
            self.class_count,
            self.split,
            self.name,
        )


# --------------------------------------------------------------------------
# IDX / raw readers
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path) -> np.ndarray:
    """Parse a u8 IDX file into an array of its declared shape."""
    data = _read_bytes(path)
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic {data[:4].hex(' ')}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header
    if payload < expected:
        raise DataFormatError(f"{path}: truncated payload, {payload} of {expected} bytes")
    if payload > expected:
        raise DataFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 0x08, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path=None, *, class_count=None, split=Split.TRAIN, name="") -> ImageDataset:
    images = read_idx(images_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: bad magic for an image file (expected 00 00 08 03)")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise DataFormatError(f"{labels_path}: bad magic for a label file (expected 00 00 08 01)")
        if len(labels) != len(images):
            raise DataFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return ImageDataset(images[:, None].copy(), labels, class_count, split, name)


def load_raw(images_path, labels_path=None, *, shape=(3, 32, 32), class_count=None,
             split=Split.TRAIN, name="") -> ImageDataset:
    data = _read_bytes(images_path)
    per_image = int(np.prod(shape))
    if len(data) % per_image:
        raise DataFormatError(f"{images_path}: {len(data)} bytes is not a multiple of {per_image}")
    images = np.frombuffer(data, dtype=np.uint8).reshape(-1, *shape).copy()
    labels = None
    if labels_path is not None:
        labels = np.frombuffer(_read_bytes(labels_path), dtype=np.uint8)
        if len(labels) != len(images):
            raise DataFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return ImageDataset(images, labels, class_count, split, name)


def write_raw(images_path, images, labels_path=None, labels=None) -> None:
    Path(images_path).write_bytes(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    if labels_path is not None:
        Path(labels_path).write_bytes(np.asarray(labels, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------------
# Dataset registry
# --------------------------------------------------------------------------

DATASETS = {
    "fmnist": {"format": "idx", "dir": "fmnist", "shape": (1, 28, 28), "classes": 10},
    "mnist": {"format": "idx", "dir": "mnist", "shape": (1, 28, 28), "classes": 10},
    "svhn": {"format": "raw", "dir": "svhn", "shape": (3, 32, 32), "classes": 10},
    "cifar10": {"format": "raw", "dir": "cifar10", "shape": (3, 32, 32), "classes": 10},
    "synthetic": {"format": "synthetic", "shape": (1, 28, 28), "classes": 10},
}
_IDX_PREFIX = {Split.TRAIN: "train", Split.TEST: "t10k"}


def data_root(root=None) -> Path:
    return Path(root or os.environ.get("DCL_DATA_ROOT") or "data")


def _existing(path: Path) -> Path | None:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def dataset_files(name: str, split=Split.TRAIN, root=None) -> tuple[Path, Path]:
    """Expected image and label paths for a registered on-disk dataset."""
    info = DATASETS[name]
    split = Split(split)
    base = data_root(root) / info["dir"]
    if info["format"] == "idx":
        prefix = _IDX_PREFIX[split]
        return base / f"{prefix}-images-idx3-ubyte", base / f"{prefix}-labels-idx1-ubyte"
    return base / f"{split.value}_images.u8", base / f"{split.value}_labels.u8"


def dataset_available(name: str, root=None) -> bool:
    """True when both splits of an on-disk dataset are present."""
    if DATASETS[name]["format"] == "synthetic":
        return True
    return all(_existing(p) is not None for split in Split for p in dataset_files(name, split, root))


def load_dataset(name: str, split=Split.TRAIN, root=None, max_samples=None, seed=0,
                 synthetic_size=2000) -> ImageDataset:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    info = DATASETS[name]
    split = Split(split)
    if info["format"] == "synthetic":
        ds = make_synthetic(synthetic_size, split=split)
    else:
        img_path, lbl_path = dataset_files(name, split, root)
        img, lbl = _existing(img_path), _existing(lbl_path)
        if img is None or lbl is None:
            raise DatasetNotFoundError(
                f"{name} {split.value} files not found: expected {img_path} and {lbl_path} "
                f"(optionally .gz); set DCL_DATA_ROOT to the directory containing '{info['dir']}/'")
        if info["format"] == "idx":
            ds = load_idx(img, lbl, class_count=info["classes"], split=split, name=name)
        else:
            ds = load_raw(img, lbl, shape=info["shape"], class_count=info["classes"], split=split, name=name)
    return subsample(ds, max_samples, seed)


def subsample(ds: ImageDataset, max_samples, seed=0) -> ImageDataset:
    """First ``max_samples`` of a seeded shuffle, kept in dataset order."""
    if max_samples is None or max_samples >= len(ds):
        return ds
    keep = np.sort(np.random.default_rng(seed).permutation(len(ds))[:max_samples])
    return ds.subset(keep)


def make_synthetic(n, class_count=10, channels=1, size=28, seed=0, split=Split.TRAIN) -> ImageDataset:
    """Class-conditional blob images for tests and demos.

    Each class owns a fixed prototype made of a few Gaussian blobs; samples
    are jittered, contrast-scaled, noisy copies. Prototypes do not depend on
    ``seed`` or ``split`` so train and test sets share classes.
    """
    split = Split(split)
    proto_rng = np.random.default_rng(20_210_104)
    yy, xx = np.mgrid[0:size, 0:size]
    protos = np.zeros((class_count, channels, size, size))
    for c in range(class_count):
        for ch in range(channels):
            for _ in range(3):
                cy, cx = proto_rng.uniform(size * 0.2, size * 0.8, 2)
                r = proto_rng.uniform(size * 0.06, size * 0.15)
                protos[c, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        protos[c] /= protos[c].max()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0 if split is Split.TRAIN else 1]))
    labels = rng.integers(0, class_count, n)
    shifts = rng.integers(-2, 3, (n, 2))
    contrast = rng.uniform(0.7, 1.0, n)
    images = np.empty((n, channels, size, size))
    for i in range(n):
        images[i] = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2)) * contrast[i]
    images += rng.normal(0, 0.1, images.shape)
    images = np.clip(np.rint(images * 255), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels, class_count, split, "synthetic")


# --------------------------------------------------------------------------
# Transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    normalize_mean: tuple[float, ...] = (0.5,)
    normalize_std: tuple[float, ...] = (0.5,)
    resize_to: int = 28
    crop_size: int = 28
    horizontal_flip: bool = True  # train phase only, p = 0.5
    sobel: bool = False

    def __post_init__(self):
        if self.crop_size > self.resize_to:
            raise ConfigError(f"crop_size {self.crop_size} exceeds resize_to {self.resize_to}")
        if len(self.normalize_mean) != len(self.normalize_std):
            raise ConfigError("normalize_mean and normalize_std lengths differ")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError("normalize_std components must be > 0")


def default_transform(channels: int, size: int, sobel=False, mean=None, std=None) -> TransformSpec:
    """Per-dataset defaults: mean/std 0.5, center crop 32 where the image allows it."""
    crop = 32 if size >= 32 else size
    return TransformSpec(
        normalize_mean=tuple(mean) if mean is not None else (0.5,) * channels,
        normalize_std=tuple(std) if std is not None else (0.5,) * channels,
        resize_to=max(size, crop),
        crop_size=crop,
        horizontal_flip=True,
        sobel=sobel,
    )


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights, half-pixel centres (identity when n_in == n_out)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if (h, w) == (size, size):
        return x
    ry = _interp_matrix(h, size).astype(x.dtype)
    rx = _interp_matrix(w, size).astype(x.dtype)
    return np.einsum("oh,nchw,pw->ncop", ry, x, rx)


def center_crop(x: np.ndarray, crop: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    top = int(round((h - crop) / 2.0))
    left = int(round((w - crop) / 2.0))
    return x[..., top:top + crop, left:left + crop]


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def sobel(batch: np.ndarray) -> np.ndarray:
    """Two-channel Sobel gradient (d/dx, d/dy) with edge-replicated borders."""
    batch = np.asarray(batch)
    c = batch.shape[1]
    if c == 3:
        w = np.asarray(LUMA_WEIGHTS, dtype=batch.dtype)
        gray = np.tensordot(batch, w, axes=([1], [0]))
    elif c == 1:
        gray = batch[:, 0]
    else:
        raise ValueError(f"sobel supports 1 or 3 channels, got {c}")
    g = np.pad(gray, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = (g[:, :-2, 2:] + 2 * g[:, 1:-1, 2:] + g[:, 2:, 2:]) - (g[:, :-2, :-2] + 2 * g[:, 1:-1, :-2] + g[:, 2:, :-2])
    dy = (g[:, 2:, :-2] + 2 * g[:, 2:, 1:-1] + g[:, 2:, 2:]) - (g[:, :-2, :-2] + 2 * g[:, :-2, 1:-1] + g[:, :-2, 2:])
    return np.stack([dx, dy], axis=1)


def transform(images: np.ndarray, spec: TransformSpec, phase=Phase.CLUSTER, flips=None) -> np.ndarray:
    """uint8 NCHW batch -> float32 network input.

    ``flips`` is a boolean mask (one per image) applied only in the train phase.
    """
    phase = Phase(phase)
    c = images.shape[1]
    if len(spec.normalize_mean) != c:
        raise ConfigError(f"transform has {len(spec.normalize_mean)} normalisation channels, images have {c}")
    mean = np.asarray(spec.normalize_mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(spec.normalize_std, dtype=np.float32)[None, :, None, None]
    x = (images.astype(np.float32) / np.float32(255.0) - mean) / std
    x = resize_bilinear(x, spec.resize_to)
    x = center_crop(x, spec.crop_size)
    if phase is Phase.TRAIN and spec.horizontal_flip and flips is not None:
        x = np.where(np.asarray(flips)[:, None, None, None], hflip(x), x)
    if spec.sobel:
        x = sobel(x)
    return np.ascontiguousarray(x, dtype=np.float32)


def apply_transforms(ds: ImageDataset, spec: TransformSpec, phase=Phase.CLUSTER, seed=0,
                     batch_size=256, order=None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(indices, batch)`` pairs in ``order`` (dataset order by default).

    Flip decisions are drawn once per call from ``seed``, so the stream does
    not depend on ``batch_size``. The cluster phase ignores ``seed``.
    """
    phase = Phase(phase)
    order = np.arange(len(ds)) if order is None else np.asarray(order)
    flips = None
    if phase is Phase.TRAIN and spec.horizontal_flip:
        flips = np.random.default_rng(seed).random(len(order)) < 0.5
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        f = None if flips is None else flips[start:start + batch_size]
        yield idx, transform(ds.images[idx], spec, phase, f)
