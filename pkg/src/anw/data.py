"""Image datasets: synthetic generation, binary IO, user partitions, normalization.

Images are float32 arrays of shape ``(H, W, 3)`` with channels in [0, 1];
a dataset stacks them into ``(n, H, W, 3)``.  On disk every channel is one
unsigned byte, so only values on the ``b / 255`` grid survive a round trip
bit-exactly.

All randomness goes through ``numpy.random.Generator`` backed by PCG64 (the
numpy default bit generator), seeded from integers or ``SeedSequence``
spawns so that every experiment is reproducible from its config.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ANW1"
CIFAR_RECORD = 3073
CIFAR_SIDE = 32


def make_rng(seed) -> np.random.Generator:
    """The one PRNG used everywhere: PCG64 seeded through SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master: int, *keys) -> int:
    """Stable 64-bit child seed for ``(master, *keys)``; string keys are hashed with CRC-32."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *words])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must have shape (n, H, W, 3), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def replace_images(self, indices, new_images) -> LabeledDataset:
        """Copy of the dataset with ``images[indices]`` swapped for ``new_images``."""
        images = self.images.copy()
        idx = np.asarray(indices, dtype=np.int64)
        if len(idx):
            images[idx] = new_images
        return LabeledDataset(images, self.labels.copy(), self.num_classes)

    def equals(self, other: LabeledDataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and self.images.shape == other.images.shape
            and self.images.dtype == other.images.dtype
            and np.array_equal(self.labels, other.labels)
            and self.images.tobytes() == other.images.tobytes()
        )


@dataclass(frozen=True)
class UserPartition:
    user_id: int
    indices: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need three components")
        if min(self.std) <= 0:
            raise ValueError("std components must be strictly positive")


# supplement data-preparation constants
CIFAR_NORM = NormalizationSpec((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
IMAGENET_NORM = NormalizationSpec((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def normalize(images: np.ndarray, spec: NormalizationSpec = CIFAR_NORM, dtype=np.float32) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` over the trailing channel axis."""
    mean = np.asarray(spec.mean, dtype=dtype)
    std = np.asarray(spec.std, dtype=dtype)
    return (np.asarray(images, dtype=dtype) - mean) / std


def denormalize(tensor: np.ndarray, spec: NormalizationSpec = CIFAR_NORM, dtype=np.float32) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=dtype)
    std = np.asarray(spec.std, dtype=dtype)
    return np.asarray(tensor, dtype=dtype) * std + mean


def quantize(images: np.ndarray) -> np.ndarray:
    """Snap [0,1] reals onto the 8-bit grid used on disk."""
    return to_bytes(images).astype(np.float32) / np.float32(255)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic data

def _shape_mask(cls: int, yy: np.ndarray, xx: np.ndarray, scale: float, angle: float) -> np.ndarray:
    """Boolean mask of the class shape on normalized coordinates in [-1, 1]."""
    c, s = np.cos(angle), np.sin(angle)
    u = (c * xx + s * yy) / scale
    v = (-s * xx + c * yy) / scale
    r = np.hypot(u, v)
    kind = cls % 10
    if kind == 0:  # disc
        return r < 0.8
    if kind == 1:  # ring
        return (r < 0.85) & (r > 0.5)
    if kind == 2:  # square
        return np.maximum(abs(u), abs(v)) < 0.7
    if kind == 3:  # triangle
        return (v < 0.6) & (abs(u) < (v + 0.7) * 0.65)
    if kind == 4:  # plus
        return ((abs(u) < 0.25) & (abs(v) < 0.85)) | ((abs(v) < 0.25) & (abs(u) < 0.85))
    if kind == 5:  # horizontal bars
        return (abs(u) < 0.85) & (abs(v) < 0.85) & (np.floor((v + 0.85) / 0.34) % 2 == 0)
    if kind == 6:  # vertical bars
        return (abs(u) < 0.85) & (abs(v) < 0.85) & (np.floor((u + 0.85) / 0.34) % 2 == 0)
    if kind == 7:  # diagonal cross
        return ((abs(u - v) < 0.3) | (abs(u + v) < 0.3)) & (r < 0.95)
    if kind == 8:  # hollow frame
        m = np.maximum(abs(u), abs(v))
        return (m < 0.8) & (m > 0.5)
    # diamond
    return abs(u) + abs(v) < 0.85


def _extra_mask(cls, yy, xx, scale, angle):
    # classes beyond ten: regular polygons with a growing side count
    sides = 3 + (cls - 10) % 7 + 2 * ((cls - 10) // 7 % 2)
    c, s = np.cos(angle), np.sin(angle)
    u = (c * xx + s * yy) / scale
    v = (-s * xx + c * yy) / scale
    theta = np.arctan2(v, u)
    sector = 2 * np.pi / sides
    local = (theta % sector) - sector / 2
    radius = 0.8 * np.cos(sector / 2) / np.cos(local)
    inner = 0.35 if (cls - 10) // 14 % 2 else 0.0
    r = np.hypot(u, v)
    return (r < radius) & (r > inner)


def _yiq_to_rgb(yiq: np.ndarray) -> np.ndarray:
    from .watermark import YIQ_INV
    return yiq @ YIQ_INV.T


def generate_synthetic(
    num_images: int,
    height: int = 32,
    width: int = 32,
    num_classes: int = 10,
    seed: int = 0,
    *,
    noise: float = 0.12,
    clutter: int = 2,
    min_contrast: float = 0.1,
    chroma_range: tuple = (0.15, 0.35),
    hue_spread: float | None = None,
) -> LabeledDataset:
    """Procedural shape-classification dataset.

    The label picks the shape; position, size, small rotation, colours,
    ``clutter`` small distractor shapes and pixel noise vary per image.
    Foreground and background colours are drawn in YIQ with a random hue
    angle (uniform unless ``hue_spread`` degrees of spread around a
    class-specific direction is given) and a luminance gap of at least
    ``min_contrast``.  Colour therefore identifies individual images while
    the class stays shape-determined, which leaves a tiny CNN a clear
    generalization gap to memorize through.
    """
    if num_images <= 0 or num_classes <= 0:
        raise ValueError("num_images and num_classes must be positive")
    if height < 8 or width < 8:
        raise ValueError("height and width must be at least 8")
    rng = make_rng(seed)
    labels = np.arange(num_images) % num_classes
    labels = labels[rng.permutation(num_images)]
    ys = (np.arange(height) + 0.5) / height * 2 - 1
    xs = (np.arange(width) + 0.5) / width * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    images = np.empty((num_images, height, width, 3), dtype=np.float32)
    golden = 137.50776405  # spreads class hue centres around the circle
    for i, cls in enumerate(labels):
        cy, cx = rng.uniform(-0.22, 0.22, size=2)
        scale = rng.uniform(0.6, 0.9)
        angle = np.deg2rad(rng.uniform(-15, 15))
        mask_fn = _shape_mask if cls < 10 else _extra_mask
        mask = mask_fn(int(cls), yy - cy, xx - cx, scale, angle)
        if hue_spread is None:
            hues = rng.uniform(0.0, 2 * np.pi, size=2)
        else:
            hues = np.deg2rad(cls * golden) + np.deg2rad(hue_spread) * rng.standard_normal(2)
        chroma = rng.uniform(*chroma_range, size=2)
        lum = rng.uniform(0.25, 0.75, size=2)
        if abs(lum[0] - lum[1]) < min_contrast:
            lum[1] = lum[0] + 1.5 * min_contrast if lum[0] < 0.5 else lum[0] - 1.5 * min_contrast
        yiq = np.stack([lum, chroma * np.cos(hues), chroma * np.sin(hues)], axis=1)
        bg, fg = _yiq_to_rgb(yiq)
        img = np.where(mask[..., None], fg, bg)
        for _ in range(clutter):
            dy, dx = rng.uniform(-0.75, 0.75, size=2)
            other = mask_fn(int(rng.integers(num_classes)), yy - dy, xx - dx, rng.uniform(0.2, 0.35), rng.uniform(0, np.pi))
            h = rng.uniform(0, 2 * np.pi)
            col = _yiq_to_rgb(np.array([rng.uniform(0.2, 0.8), 0.15 * np.cos(h), 0.15 * np.sin(h)]))
            img = np.where(other[..., None], col, img)
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(quantize(images), labels, num_classes)


# ---------------------------------------------------------------------------
# binary formats

_HEADER = struct.Struct("<4sIIIII")


def write_dataset(dataset: LabeledDataset, path) -> None:
    if len(dataset) == 0:
        raise ValueError("refusing to write an empty dataset")
    n, h, w, c = dataset.images.shape
    header = _HEADER.pack(MAGIC, n, h, w, c, dataset.num_classes)
    body = dataset.labels.astype("<u2").tobytes() + to_bytes(dataset.images).tobytes()
    Path(path).write_bytes(header + body)


def read_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic", field="magic", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", field="header", offset=len(raw))
    _, n, h, w, c, num_classes = _HEADER.unpack_from(raw)
    if c != 3:
        raise FormatError(f"channels must be 3, got {c}", field="channels", offset=16)
    if num_classes == 0:
        raise FormatError("num_classes must be positive", field="num_classes", offset=20)
    if n == 0 or h == 0 or w == 0:
        raise FormatError("empty dataset dimensions", field="count" if n == 0 else "height" if h == 0 else "width", offset=4)
    off = _HEADER.size
    label_end = off + 2 * n
    if len(raw) < label_end:
        raise FormatError("truncated labels", field="labels", offset=len(raw))
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError("label exceeds num_classes", field="labels", offset=off + 2 * bad)
    pixel_bytes = n * h * w * 3
    if len(raw) < label_end + pixel_bytes:
        raise FormatError("truncated pixels", field="pixels", offset=len(raw))
    if len(raw) > label_end + pixel_bytes:
        raise FormatError("trailing bytes", field="pixels", offset=label_end + pixel_bytes)
    pix = np.frombuffer(raw, dtype=np.uint8, count=pixel_bytes, offset=label_end)
    images = pix.reshape(n, h, w, 3).astype(np.float32) / np.float32(255)
    return LabeledDataset(images, labels, int(num_classes))


def read_cifar10(path) -> LabeledDataset:
    """Parse a CIFAR-10 binary batch (label byte + 3072 planar pixel bytes)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise FormatError("empty CIFAR file", field="record", offset=0)
    whole = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD:
        raise FormatError("truncated CIFAR record", field="record", offset=whole * CIFAR_RECORD)
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"label byte {labels[bad]} >= 10", field="label", offset=bad * CIFAR_RECORD)
    planes = recs[:, 1:].reshape(whole, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / np.float32(255)
    return LabeledDataset(np.ascontiguousarray(images), labels, 10)


def split_users(dataset_or_size, num_users: int, seed: int = 0) -> list[UserPartition]:
    """Shuffle indices by seed and cut them into near-equal disjoint slices.

    The first ``n % num_users`` users receive one extra index.
    """
    n = dataset_or_size if isinstance(dataset_or_size, (int, np.integer)) else len(dataset_or_size)
    if num_users <= 0:
        raise ValueError("num_users must be positive")
    if num_users > n:
        raise ValueError(f"num_users ({num_users}) exceeds dataset size ({n})")
    order = make_rng(seed).permutation(n)
    return [UserPartition(u, np.sort(chunk)) for u, chunk in enumerate(np.array_split(order, num_users))]


def train_test_split(dataset: LabeledDataset, test_fraction: float, seed: int = 0):
    n = len(dataset)
    order = make_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))
