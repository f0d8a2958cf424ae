"""Training-time data augmentations.

Each augmentation exists in two forms: a single-image function taking an
``(H, W, 3)`` array and a ``numpy`` Generator, and a batched variant used by
the training loop that draws one set of random parameters per sample.  Both
share the same arithmetic; hue jitter goes through the watermark LCT so that
jitter and watermarking use identical colour math.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import make_rng
from .watermark import LUMA, WatermarkKey, apply_color_matrix, lct, yiq_matrix

HUE_JITTER_DEFAULT = 288.0


@dataclass(frozen=True)
class JitterRanges:
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0  # degrees

    def is_identity(self) -> bool:
        return not (self.brightness or self.contrast or self.saturation or self.hue)


@dataclass(frozen=True)
class AugmentationPipeline:
    """Enabled augmentations; applied in the fixed order crop, flip, cutout, jitter, noise."""

    crop_pad: int = 0
    flip: bool = False
    cutout: int = 0
    jitter: JitterRanges = JitterRanges()
    noise_sigma2: float = 0.0

    def __post_init__(self):
        if self.crop_pad < 0 or self.cutout < 0 or self.noise_sigma2 < 0:
            raise ValueError("augmentation parameters must be non-negative")
        j = self.jitter
        if min(j.brightness, j.contrast, j.saturation, j.hue) < 0:
            raise ValueError("jitter ranges must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    def apply_batch(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = images
        if self.crop_pad:
            out = random_crop_batch(out, self.crop_pad, rng)
        if self.flip:
            out = horizontal_flip_batch(out, rng)
        if self.cutout:
            out = cutout_batch(out, self.cutout, rng)
        if not self.jitter.is_identity():
            out = color_jitter_batch(out, self.jitter, rng)
        if self.noise_sigma2:
            out = gaussian_noise(out, self.noise_sigma2, rng)
        return out


# -- crop --------------------------------------------------------------------

def random_crop(image: np.ndarray, pad: int, rng) -> np.ndarray:
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return image.copy()
    rng = make_rng(rng)
    return _crop(image[None], pad, rng.integers(0, 2 * pad + 1, size=(1, 2)))[0]


def random_crop_batch(images: np.ndarray, pad: int, rng) -> np.ndarray:
    if pad == 0:
        return images.copy()
    return _crop(images, pad, rng.integers(0, 2 * pad + 1, size=(len(images), 2)))


def _crop(images, pad, offsets):
    n, h, w, c = images.shape
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=images.dtype)
    padded[:, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, dy:dy + h, dx:dx + w]
    return out


# -- flip --------------------------------------------------------------------

def horizontal_flip(image: np.ndarray, rng, p: float = 0.5) -> np.ndarray:
    rng = make_rng(rng)
    return image[:, ::-1].copy() if rng.random() < p else image.copy()


def horizontal_flip_batch(images: np.ndarray, rng, p: float = 0.5) -> np.ndarray:
    flip = rng.random(len(images)) < p
    out = images.copy()
    out[flip] = images[flip, :, ::-1]
    return out


# -- cutout ------------------------------------------------------------------

def cutout(image: np.ndarray, size: int, rng) -> np.ndarray:
    if size <= 0:
        return image.copy()
    return cutout_batch(image[None], size, make_rng(rng))[0]


def cutout_batch(images: np.ndarray, size: int, rng) -> np.ndarray:
    """Zero one ``size`` x ``size`` window per image; the centre is uniform, the window clips at borders."""
    out = images.copy()
    if size <= 0:
        return out
    n, h, w, _ = images.shape
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    half = size // 2
    for i in range(n):
        y0, x0 = max(cy[i] - half, 0), max(cx[i] - half, 0)
        y1, x1 = min(cy[i] - half + size, h), min(cx[i] - half + size, w)
        out[i, y0:y1, x0:x1] = 0
    return out


# -- noise -------------------------------------------------------------------

def gaussian_noise(image: np.ndarray, sigma2: float, rng) -> np.ndarray:
    """Add N(0, sigma2) per channel and clip; works for one image or a stack."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0:
        return np.array(image, copy=True)
    rng = make_rng(rng)
    noise = rng.standard_normal(np.shape(image)) * np.sqrt(sigma2)
    return np.clip(image + noise, 0.0, 1.0).astype(np.asarray(image).dtype)


# -- colour jitter -----------------------------------------------------------

def _jitter_params(ranges: JitterRanges, n: int, rng):
    return (
        rng.uniform(-ranges.brightness, ranges.brightness, size=n) if ranges.brightness else np.zeros(n),
        1.0 + rng.uniform(-ranges.contrast, ranges.contrast, size=n) if ranges.contrast else np.ones(n),
        1.0 + rng.uniform(-ranges.saturation, ranges.saturation, size=n) if ranges.saturation else np.ones(n),
        rng.uniform(-ranges.hue, ranges.hue, size=n) if ranges.hue else np.zeros(n),
    )


def _apply_jitter(images, brightness, contrast, saturation, hue):
    out = images.astype(np.float64)
    if np.any(brightness):
        out = np.clip(out + brightness[:, None, None, None], 0.0, 1.0)
    if np.any(contrast != 1.0):
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = np.clip(mean + contrast[:, None, None, None] * (out - mean), 0.0, 1.0)
    if np.any(saturation != 1.0):
        lum = (out @ LUMA)[..., None]
        out = np.clip(lum + saturation[:, None, None, None] * (out - lum), 0.0, 1.0)
    if np.any(hue):
        basis = yiq_matrix()
        mats = np.stack([lct(WatermarkKey(basis, a)) for a in hue])
        out = apply_color_matrix(out, mats)
    return out.astype(images.dtype)


def color_jitter(image: np.ndarray, ranges: JitterRanges, rng) -> np.ndarray:
    """Random brightness, contrast, saturation, then hue rotation; clipped after each step."""
    rng = make_rng(rng)
    return _apply_jitter(image[None], *_jitter_params(ranges, 1, rng))[0]


def color_jitter_batch(images: np.ndarray, ranges: JitterRanges, rng) -> np.ndarray:
    return _apply_jitter(images, *_jitter_params(ranges, len(images), rng))
