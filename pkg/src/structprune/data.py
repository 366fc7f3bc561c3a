"""Dataset ingestion: CIFAR-10 binary batches and a seeded synthetic stand-in."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
DATA_ROOT_ENV = "STRUCTPRUNE_DATA"


class DataFormatError(ValueError):
    pass


def normalization_constants(source: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, std) read from the packaged config file."""
    text = resources.files("structprune").joinpath("config/normalization.json").read_text()
    entry = json.loads(text)[source]
    return np.asarray(entry["mean"], dtype=np.float32), np.asarray(entry["std"], dtype=np.float32)


@dataclass
class DatasetHandle:
    source: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int
    subset_seed: int | None = None
    subset_size: int | None = None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"train": len(self.train_y), "test": len(self.test_y)}

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        raise KeyError(f"unknown split {name!r}")


# -- CIFAR-10 ----------------------------------------------------------------


def parse_cifar_records(raw: bytes, expected_records: int | None = None, name: str = "<bytes>"):
    """Decode raw CIFAR-10 records into uint8 images (n, 3, 32, 32) and labels."""
    n_bytes = len(raw)
    if expected_records is not None:
        expected = expected_records * CIFAR_RECORD_BYTES
        if n_bytes != expected:
            raise DataFormatError(f"{name}: expected {expected} bytes, found {n_bytes}")
    elif n_bytes == 0 or n_bytes % CIFAR_RECORD_BYTES:
        raise DataFormatError(
            f"{name}: size {n_bytes} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{name}: label {labels.max()} outside [0, 9]")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _read_batch(path: Path):
    if not path.exists():
        raise DataFormatError(f"missing CIFAR-10 batch file {path}")
    return parse_cifar_records(path.read_bytes(), CIFAR_RECORDS_PER_FILE, str(path))


def standardize(images_u8: np.ndarray, source: str = "cifar10") -> np.ndarray:
    mean, std = normalization_constants(source)
    x = images_u8.astype(np.float32) / 255.0
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def load_cifar10(path=None) -> DatasetHandle:
    """Load the six standard binary batches from ``path`` (or ``$STRUCTPRUNE_DATA``)."""
    if path is None:
        path = os.environ.get(DATA_ROOT_ENV)
        if path is None:
            raise DataFormatError(f"no CIFAR-10 directory given and ${DATA_ROOT_ENV} is unset")
    root = Path(path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [_read_batch(root / f) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_batch(root / CIFAR_TEST_FILE)
    return DatasetHandle("cifar10-binary", standardize(train_x), train_y, standardize(test_x), test_y, 10)


def balanced_subset(handle: DatasetHandle, size: int, seed: int = 0) -> DatasetHandle:
    """Seeded class-balanced subset of the training split; the test split is kept whole."""
    if size % handle.classes:
        raise ValueError(f"subset size {size} is not divisible by {handle.classes} classes")
    per_class = size // handle.classes
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(handle.classes):
        idx = np.flatnonzero(handle.train_y == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} examples, need {per_class}")
        picks.append(rng.choice(idx, per_class, replace=False))
    order = np.sort(np.concatenate(picks))
    return DatasetHandle(
        handle.source, handle.train_x[order], handle.train_y[order], handle.test_x, handle.test_y,
        handle.classes, subset_seed=seed, subset_size=size,
    )


# -- synthetic ------------------------------------------------------------------


def _blob_field(rng, resolution, n_blobs):
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float32)
    field = np.zeros((3, resolution, resolution), dtype=np.float32)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * resolution
        sigma = rng.uniform(0.08, 0.18) * resolution
        color = rng.normal(0.0, 1.0, size=3).astype(np.float32)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        field += color[:, None, None] * bump[None]
    return field


def _synth_split(rng, prototypes, per_class, noise, shift, distractor):
    classes, _, res, _ = prototypes.shape
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    amp = rng.uniform(0.6, 1.4, size=n).astype(np.float32)
    dy = rng.integers(-shift, shift + 1, size=n)
    dx = rng.integers(-shift, shift + 1, size=n)
    distract = rng.integers(0, classes, size=n)
    images = np.empty((n, 3, res, res), dtype=np.float32)
    for i in range(n):
        img = amp[i] * prototypes[labels[i]] + distractor * prototypes[distract[i]]
        images[i] = np.roll(img, (dy[i], dx[i]), axis=(1, 2))
    images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    perm = rng.permutation(n)
    return images[perm], labels[perm]


def make_synthetic(classes: int = 10, per_class: int = 100, resolution: int = 32, seed: int = 0,
                   test_per_class: int | None = None, noise: float = 2.0, shift: int = 3,
                   distractor: float = 0.8) -> DatasetHandle:
    """Class-keyed Gaussian-blob images with amplitude jitter, shifts, a distractor and noise.

    Train and test are drawn from independent streams of the same seed.
    """
    if min(classes, per_class, resolution) < 1:
        raise ValueError("classes, per_class and resolution must all be positive")
    test_per_class = max(1, per_class // 5) if test_per_class is None else test_per_class
    root = np.random.SeedSequence(seed)
    proto_ss, train_ss, test_ss = root.spawn(3)
    proto_rng = np.random.default_rng(proto_ss)
    prototypes = np.stack([_blob_field(proto_rng, resolution, 3) for _ in range(classes)])
    prototypes /= prototypes.std(axis=(1, 2, 3), keepdims=True)
    train_x, train_y = _synth_split(np.random.default_rng(train_ss), prototypes, per_class, noise, shift, distractor)
    test_x, test_y = _synth_split(np.random.default_rng(test_ss), prototypes, test_per_class, noise, shift, distractor)
    return DatasetHandle("synthetic", train_x, train_y, test_x, test_y, classes, subset_seed=seed,
                         subset_size=len(train_y))


# -- batching and augmentation -------------------------------------------------


def augment(images: np.ndarray, rng, pad: int = 4, crop: bool = True, flip: bool = True) -> np.ndarray:
    """Reflect-pad + random crop back to size, then random horizontal flip (p=0.5)."""
    n, c, h, w = images.shape
    out = images
    if crop:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        if out is images:
            out = images.copy()
        out[mask] = out[mask, :, :, ::-1]
    return out


def iterate_minibatches(x, y, batch_size: int, rng=None, shuffle: bool = True):
    n = len(y)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield x[idx], y[idx]


class BatchStream:
    """Endless seeded stream of (optionally augmented) training minibatches."""

    def __init__(self, x, y, batch_size: int, seed: int = 0, crop: bool = True, flip: bool = True):
        self.x, self.y, self.batch_size = x, y, batch_size
        self.rng = np.random.default_rng(seed)
        self.crop, self.flip = crop, flip
        self._it = iter(())

    def __iter__(self):
        return self

    def __next__(self):
        try:
            xb, yb = next(self._it)
        except StopIteration:
            self._it = iterate_minibatches(self.x, self.y, self.batch_size, self.rng)
            xb, yb = next(self._it)
        if self.crop or self.flip:
            xb = augment(xb, self.rng, crop=self.crop, flip=self.flip)
        return xb, yb
