"""CIFAR-10 binary ingestion, a synthetic oriented-shape corpus, and batching.

Images are held as uint8 [N, C, H, W] so that the CIFAR-10 binary layout
round-trips byte for byte; ``Dataset.images`` exposes them scaled to [0, 1].
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORDS_PER_FILE = 10_000


class DataError(Exception):
    """Raised when a dataset on disk is missing or malformed."""


@dataclass(frozen=True)
class Dataset:
    pixels: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise ValueError("pixels must be a uint8 [N, C, H, W] array")
        if len(self.labels) != len(self.pixels):
            raise ValueError(f"{len(self.labels)} labels for {len(self.pixels)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def images(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels.astype(np.float32) / 255.0)

    @property
    def targets(self) -> torch.Tensor:
        return torch.from_numpy(self.labels.astype(np.int64))

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()

    @property
    def multiset_hash(self) -> str:
        """Order-independent hash: equal for any permutation of the records."""
        digests = sorted(
            hashlib.sha256(p.tobytes() + int(y).to_bytes(8, "little")).digest()
            for p, y in zip(self.pixels, self.labels)
        )
        return hashlib.sha256(b"".join(digests)).hexdigest()

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index], self.labels[index], self.split, self.num_classes)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise DataError(
            f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"(file has {raw.size} bytes, record size {CIFAR_RECORD})"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: label byte {labels[bad]} at offset {bad * CIFAR_RECORD}")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return pixels, labels


def load_cifar10_split(directory, split: str = "test") -> Dataset:
    directory = Path(directory)
    if not (directory / CIFAR_TEST_FILES[0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [_read_cifar_file(directory / n) for n in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([y for _, y in parts])
    return Dataset(pixels, labels, split, 10)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the (train, test) splits from the standard binary batch files."""
    return load_cifar10_split(directory, "train"), load_cifar10_split(directory, "test")


def write_cifar10_file(dataset: Dataset, path) -> None:
    """Serialize records in the CIFAR-10 binary layout (label byte + R, G, B planes)."""
    if dataset.pixels.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError("CIFAR-10 layout requires 3x32x32 images")
    records = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = dataset.pixels.reshape(len(dataset), -1)
    Path(path).write_bytes(records.tobytes())


def write_cifar10(train: Dataset, test: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(CIFAR_TRAIN_FILES))
    for name, idx in zip(CIFAR_TRAIN_FILES, chunks):
        write_cifar10_file(train.take(idx), directory / name)
    write_cifar10_file(test, directory / CIFAR_TEST_FILES[0])


# ---------------------------------------------------------------------------
# synthetic corpus

SHAPES = ("square", "disk", "triangle", "cross", "ring", "bar", "diamond", "chevron", "dots", "frame")


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 1000
    image_size: int = 32
    num_classes: int = 4
    seed: int = 0
    noise: float = 0.04

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} classes")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    # u: horizontal, v: vertical (down positive), both centred on the shape
    if kind == "square":
        return (np.abs(u) < r) & (np.abs(v) < r)
    if kind == "disk":
        return u**2 + v**2 < r**2
    if kind == "triangle":
        return (v < r) & (v > -r) & (np.abs(u) < (v + r) / 2)
    if kind == "cross":
        return ((np.abs(u) < r / 3) & (np.abs(v) < r)) | ((np.abs(v) < r / 3) & (np.abs(u) < r))
    if kind == "ring":
        d = u**2 + v**2
        return (d < r**2) & (d > (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) < r) & (np.abs(v) < r / 2.5)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) < r
    if kind == "chevron":
        return (np.abs(u) < r) & (np.abs(v - np.abs(u) + r / 2) < r / 3)
    if kind == "dots":
        return ((u - r / 2) ** 2 + v**2 < (r / 2.5) ** 2) | ((u + r / 2) ** 2 + v**2 < (r / 2.5) ** 2)
    if kind == "frame":
        return (np.maximum(np.abs(u), np.abs(v)) < r) & (np.maximum(np.abs(u), np.abs(v)) > 0.6 * r)
    raise ValueError(kind)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Images of one large coloured shape per class over an upright scene.

    The scene is a lit sky over darker ground with a horizon in the lower
    half and a marker dot above the shape, so the upright orientation is
    recoverable (rotation prediction is learnable). Shapes extend past the
    image centre, so the centre is never constant and can be inferred from
    its surroundings (inpainting has signal).
    """
    rng = np.random.default_rng(spec.seed)
    n, s = spec.num_images, spec.image_size
    labels = rng.integers(0, spec.num_classes, size=n).astype(np.int64)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    out = np.empty((n, 3, s, s), dtype=np.uint8)
    for i in range(n):
        sky = rng.uniform(0.5, 0.85, size=3)
        ground = rng.uniform(0.1, 0.4, size=3)
        horizon = s * rng.uniform(0.6, 0.8)
        t = np.clip((yy - horizon) / 1.5 + 0.5, 0, 1)[None]
        shade = (1 - 0.3 * yy / s)[None]
        img = (sky[:, None, None] * shade) * (1 - t) + ground[:, None, None] * t
        phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.6, 1.2)
        img = img + 0.05 * np.sin(freq * xx + phase)[None] * t
        cx = s / 2 + rng.uniform(-0.06, 0.06) * s
        cy = s / 2 + rng.uniform(-0.04, 0.06) * s
        r = rng.uniform(0.3, 0.38) * s
        colour = rng.uniform(0.0, 1.0, size=3)
        colour[rng.integers(3)] = rng.uniform(0.8, 1.0)
        mask = _shape_mask(SHAPES[labels[i]], xx - cx, yy - cy, r)
        img[:, mask] = colour[:, None] * (1 - 0.25 * ((yy[mask] - cy) / r + 1) / 2)[None]
        marker = (xx - cx) ** 2 + (yy - (cy - r - s * 0.07)) ** 2 < (s * 0.06) ** 2
        img[:, marker] = 1.0 - colour[:, None]
        img = img + rng.normal(0, spec.noise, size=img.shape)
        out[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return Dataset(out, labels, "train", spec.num_classes)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = len(dataset) - int(round(test_fraction * len(dataset)))
    train, test = dataset.take(order[:cut]), dataset.take(order[cut:])
    return (
        Dataset(train.pixels, train.labels, "train", dataset.num_classes),
        Dataset(test.pixels, test.labels, "test", dataset.num_classes),
    )


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    if n > len(dataset):
        raise ValueError(f"cannot take {n} records from a dataset of {len(dataset)}")
    if n < 0:
        raise ValueError("n must be >= 0")
    order = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.take(order)


def batches(dataset: Dataset, batch_size: int, seed: int | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield (images, labels); every record exactly once, shuffled when ``seed`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset)) if seed is None else np.random.default_rng(seed).permutation(len(dataset))
    images, targets = dataset.images, dataset.targets
    for start in range(0, len(dataset), batch_size):
        idx = torch.from_numpy(order[start:start + batch_size])
        yield images[idx], targets[idx]
