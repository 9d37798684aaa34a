"""Dataset ingestion and generation.

Two sources: IDX-format image/label files (the MNIST distribution format)
and a deterministic synthetic corpus for fast runs.  Synthetic class k is a
fixed geometric template plus seeded Gaussian pixel noise, so a
nearest-template matcher is an exact oracle at zero noise and a strong one
at the default noise level.

Images are channels-last float32 in [0, 1]; datasets are immutable after
construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import generator

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (n, h, w, c), float32 in [0, 1]
    labels: np.ndarray  # (n,), int64
    class_count: int
    name: str

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, h, w, c), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def take(self, indices: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.images[indices], self.labels[indices], self.class_count, name or self.name
        )


@dataclass(frozen=True)
class SplitSpec:
    validation_count: int
    seed: int


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    per_class: int
    image_side: int
    seed: int
    noise_sigma: float = 0.05
    contrast: float = 1.0  # scales template separation; 1.0 = full-strength shapes

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")


def _read_all(source) -> bytes:
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_bytes()


def _parse_idx(data: bytes, expect_magic: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise IdxTruncatedError(f"{what}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise IdxMagicError(f"{what}: magic {magic:#010x}, expected {expect_magic:#010x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(data) < header:
        raise IdxTruncatedError(f"{what}: file ends inside the dimension header")
    dims = struct.unpack(f">{rank}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
    if len(data) < header + count:
        raise IdxTruncatedError(
            f"{what}: payload has {len(data) - header} bytes, header promises {count}"
        )
    if len(data) > header + count:
        raise IdxError(f"{what}: {len(data) - header - count} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_source, labels_source, name: str = "idx") -> LabeledDataset:
    """Load an IDX image/label file pair; u8 pixels are scaled by 1/255."""
    raw_images = _parse_idx(_read_all(images_source), IDX_IMAGES_MAGIC, "images")
    raw_labels = _parse_idx(_read_all(labels_source), IDX_LABELS_MAGIC, "labels")
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise IdxCountMismatchError(
            f"{raw_images.shape[0]} images but {raw_labels.shape[0]} labels"
        )
    images = (raw_images.astype(np.float32) / 255.0)[..., None]
    labels = raw_labels.astype(np.int64)
    return LabeledDataset(images, labels, int(labels.max()) + 1 if labels.size else 0, name)


def _draw_template(k: int, side: int) -> np.ndarray:
    """Fixed shape for class k: bars, diagonals, crosses, rings, discs, checkers."""
    t = np.zeros((side, side), dtype=np.float64)
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    band = max(1.0, side / 6.0)
    kind = k % 10
    if kind == 0:  # horizontal bar
        t[np.abs(yy - c) < band] = 1.0
    elif kind == 1:  # vertical bar
        t[np.abs(xx - c) < band] = 1.0
    elif kind == 2:  # main diagonal
        t[np.abs(yy - xx) < band] = 1.0
    elif kind == 3:  # anti-diagonal
        t[np.abs(yy + xx - 2 * c) < band] = 1.0
    elif kind == 4:  # cross
        t[(np.abs(yy - c) < band) | (np.abs(xx - c) < band)] = 1.0
    elif kind == 5:  # X
        t[(np.abs(yy - xx) < band) | (np.abs(yy + xx - 2 * c) < band)] = 1.0
    elif kind == 6:  # hollow square
        r = np.maximum(np.abs(yy - c), np.abs(xx - c))
        t[(r < side / 2.8) & (r > side / 2.8 - band)] = 1.0
    elif kind == 7:  # filled square
        r = np.maximum(np.abs(yy - c), np.abs(xx - c))
        t[r < side / 3.5] = 1.0
    elif kind == 8:  # ring
        r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        t[(r < side / 2.6) & (r > side / 2.6 - band)] = 1.0
    else:  # filled disc
        r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        t[r < side / 3.2] = 1.0
    if k >= 10:  # further classes reuse shapes at reduced intensity
        t *= 0.55 ** (k // 10)
    return t


def class_templates(classes: int, side: int, contrast: float = 1.0) -> np.ndarray:
    """Noise-free class prototypes, shape (classes, side, side), values in [0, 1].

    ``contrast`` < 1 pulls every template toward the global mean image,
    shrinking between-class distances without moving class boundaries.
    """
    base = np.stack([_draw_template(k, side) for k in range(classes)])
    if contrast != 1.0:
        mean = base.mean(axis=0, keepdims=True)
        base = mean + contrast * (base - mean)
    return np.clip(base, 0.0, 1.0).astype(np.float32)


def make_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Deterministic synthetic corpus: per-class template plus seeded noise."""
    templates = class_templates(spec.classes, spec.image_side, spec.contrast)
    rng = generator(spec.seed, "synthetic")
    n = spec.classes * spec.per_class
    images = np.empty((n, spec.image_side, spec.image_side, 1), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for k in range(spec.classes):
        block = templates[k][None, :, :] + spec.noise_sigma * rng.standard_normal(
            (spec.per_class, spec.image_side, spec.image_side)
        )
        images[row : row + spec.per_class, :, :, 0] = np.clip(block, 0.0, 1.0)
        labels[row : row + spec.per_class] = k
        row += spec.per_class
    name = f"synthetic-c{spec.classes}-n{spec.per_class}-s{spec.image_side}-seed{spec.seed}"
    return LabeledDataset(images, labels, spec.classes, name)


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded uniform-random partition into (train, validation); disjoint and exhaustive."""
    n = len(dataset)
    if spec.validation_count >= n:
        raise ValueError(f"validation_count {spec.validation_count} >= dataset size {n}")
    perm = generator(spec.seed, "split").permutation(n)
    val_idx = perm[: spec.validation_count]
    train_idx = perm[spec.validation_count :]
    return (
        dataset.take(train_idx, f"{dataset.name}/train"),
        dataset.take(val_idx, f"{dataset.name}/val"),
    )


def find_mnist(directory) -> tuple[Path, Path, Path, Path] | None:
    """Locate the four standard MNIST IDX files under ``directory``; None if absent.

    Accepts both the classic dotted names (train-images.idx3-ubyte) and the
    dashed names (train-images-idx3-ubyte), optionally gzip-free only.
    """
    d = Path(directory)
    found = []
    for stem in ("train-images", "train-labels", "t10k-images", "t10k-labels"):
        hits = sorted(d.glob(f"{stem}?idx?-ubyte"))
        if not hits:
            return None
        found.append(hits[0])
    return tuple(found)  # type: ignore[return-value]
