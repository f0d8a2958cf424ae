"""Linear colour transformations used as private image watermarks.

A watermark key pairs a 3x3 colour basis ``B`` (YIQ by default) with a
signature ``k`` in degrees.  Every pixel ``v`` becomes ``B T_k B^-1 v``,
where ``T_k`` rotates the two chroma coordinates by ``k`` degrees and leaves
the first (luma) coordinate alone.  Results are clipped back into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import make_rng

YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.596, -0.275, -0.321],
        [0.212, -0.523, 0.311],
    ],
    dtype=np.float64,
)
YIQ_INV = np.linalg.inv(YIQ)
LUMA = YIQ[0]

DET_GUARD = 1e-3
MAX_BASIS_DRAWS = 1000


@dataclass(frozen=True)
class ColorBasis:
    matrix: np.ndarray
    inverse: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ValueError("colour basis is singular")
        inv = np.linalg.inv(m) if self.inverse is None else np.asarray(self.inverse, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "inverse", inv)

    def to_list(self) -> list[float]:
        return [float(x) for x in self.matrix.ravel()]

    @classmethod
    def from_list(cls, values) -> ColorBasis:
        values = list(values)
        if len(values) != 9:
            raise ValueError("a colour basis needs 9 values")
        return cls(np.array(values, dtype=np.float64).reshape(3, 3))


@dataclass(frozen=True)
class WatermarkKey:
    basis: ColorBasis
    signature: float

    def to_json(self, include_signature: bool = True) -> dict:
        out = {"basis": self.basis.to_list()}
        if include_signature:
            out["signature"] = float(self.signature)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> WatermarkKey:
        return cls(ColorBasis.from_list(obj["basis"]), float(obj.get("signature", 0.0)))


@dataclass(frozen=True)
class BlueChannelKey:
    alpha: float
    positions: np.ndarray
    bits: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        bits = np.asarray(self.bits, dtype=np.int64).ravel()
        if len(pos) != len(bits):
            raise ValueError("positions and bits differ in length")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("bits must be 0 or 1")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise ValueError("positions must be unique")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bits", bits)

    def with_alpha(self, alpha: float) -> BlueChannelKey:
        return BlueChannelKey(alpha, self.positions, self.bits)

    def to_json(self, include_alpha: bool = True) -> dict:
        out = {"positions": self.positions.tolist(), "bits": self.bits.tolist()}
        if include_alpha:
            out["alpha"] = float(self.alpha)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> BlueChannelKey:
        return cls(float(obj.get("alpha", 0.0)), obj["positions"], obj["bits"])


def yiq_matrix() -> ColorBasis:
    return ColorBasis(YIQ.copy(), YIQ_INV.copy())


def rotation_matrix(k_degrees: float) -> np.ndarray:
    theta = np.deg2rad(float(k_degrees) % 360.0)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_derivative(k_degrees: float) -> np.ndarray:
    """d T_k / d k, i.e. the theta-derivative scaled by pi/180."""
    theta = np.deg2rad(float(k_degrees) % 360.0)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]) * (np.pi / 180.0)


def lct(key: WatermarkKey) -> np.ndarray:
    """Per-pixel map: into the basis's colour space, rotate the chroma plane, back to RGB."""
    b = key.basis
    return b.inverse @ rotation_matrix(key.signature) @ b.matrix


def lct_derivative(key: WatermarkKey) -> np.ndarray:
    b = key.basis
    return b.inverse @ rotation_derivative(key.signature) @ b.matrix


def apply_color_matrix(images: np.ndarray, matrix: np.ndarray, clip: bool = True) -> np.ndarray:
    """Apply a 3x3 matrix to every pixel of one image or a stack of images.

    ``matrix`` may also be a stack ``(n, 3, 3)`` matching a stack of images.
    """
    images = np.asarray(images)
    out_dtype = images.dtype if images.dtype in (np.float32, np.float64) else np.float64
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 2:
        out = images.astype(np.float64, copy=False) @ m.T
    else:
        out = np.einsum("n...c,ndc->n...d", images.astype(np.float64, copy=False), m)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(out_dtype, copy=False)


def watermark_image(image: np.ndarray, key: WatermarkKey, clip: bool = True) -> np.ndarray:
    """``clip(g_k v)`` for every pixel ``v``; works on a single image or a stack."""
    return apply_color_matrix(image, lct(key), clip=clip)


def random_user_basis(rng) -> ColorBasis:
    """Draw a user basis with i.i.d. U(-1, 1) entries, rejecting near-singular ones."""
    rng = make_rng(rng)
    for _ in range(MAX_BASIS_DRAWS):
        m = rng.uniform(-1.0, 1.0, size=(3, 3))
        if abs(np.linalg.det(m)) > DET_GUARD:
            return ColorBasis(m)
    raise RuntimeError(f"no well-conditioned basis in {MAX_BASIS_DRAWS} draws")


def luminance(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) @ LUMA


def random_positions(height: int, width: int, count: int, seed) -> np.ndarray:
    """``count`` distinct (row, col) pairs, drawn without replacement."""
    total = height * width
    if count < 0 or count > total:
        raise ValueError(f"cannot choose {count} positions from {total} pixels")
    flat = make_rng(seed).choice(total, size=count, replace=False)
    return np.stack([flat // width, flat % width], axis=1).astype(np.int64)


def random_blue_key(height: int, width: int, count: int, alpha: float, seed) -> BlueChannelKey:
    rng = make_rng(seed)
    positions = random_positions(height, width, count, rng)
    bits = rng.integers(0, 2, size=count)
    return BlueChannelKey(alpha, positions, bits)


def blue_channel_watermark(image: np.ndarray, key: BlueChannelKey) -> np.ndarray:
    """Overwrite the blue channel of the key's pixels with ``(2w - 1) * alpha * L``.

    Accepts one image ``(H, W, 3)`` or a stack ``(n, H, W, 3)``.
    """
    image = np.asarray(image)
    h, w = image.shape[-3], image.shape[-2]
    rows, cols = key.positions[:, 0], key.positions[:, 1]
    if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w):
        raise ValueError("watermark position out of bounds")
    out = image.copy()
    lum = luminance(image[..., rows, cols, :])
    sign = 2.0 * key.bits - 1.0
    out[..., rows, cols, 2] = np.clip(sign * key.alpha * lum, 0.0, 1.0)
    return out
