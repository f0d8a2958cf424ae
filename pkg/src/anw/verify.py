"""Signature inference: recover the hue signature a model memorized.

The arbitrator never sees the claimed signature while searching; it only
enters :func:`verify` after the search, for the match decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CIFAR_NORM, NormalizationSpec, normalize
from .errors import NumericalError
from .nn import Classifier, backward, example_losses
from .watermark import (
    BlueChannelKey,
    ColorBasis,
    WatermarkKey,
    apply_color_matrix,
    blue_channel_watermark,
    lct,
    lct_derivative,
)


@dataclass(frozen=True)
class SignatureSpace:
    n: int = 12

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a signature space needs at least one slot")

    @classmethod
    def from_tau(cls, tau: float) -> SignatureSpace:
        n = 360.0 / (2 * tau)
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"2*tau={2 * tau} does not tile 360 degrees")
        return cls(int(round(n)))

    @property
    def tau(self) -> float:
        return 180.0 / self.n

    @property
    def candidates(self) -> np.ndarray:
        """Slot centres; slot 0 is reserved for "no watermark"."""
        return np.arange(self.n) * (360.0 / self.n)

    @property
    def signatures(self) -> np.ndarray:
        """Centres a user may pick (everything but the no-watermark slot)."""
        return self.candidates[1:]


@dataclass(frozen=True)
class GradientSchedule:
    iterations: int = 300
    base_lr: float = 0.1
    decay: float = 0.1
    decay_every: int = 100

    def lr_at(self, it: int) -> float:
        return self.base_lr * self.decay ** (it // self.decay_every)


@dataclass
class VerificationReport:
    method: str
    inferred: float
    tau: float
    per_candidate_losses: list
    matched: bool | None = None
    claimed: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "inferred": float(self.inferred),
            "tau": float(self.tau),
            "candidates": [{"k": float(k), "loss": float(l)} for k, l in self.per_candidate_losses],
            "metadata": self.metadata,
        }
        if self.matched is not None:
            out["matched"] = bool(self.matched)
            out["claimed"] = float(self.claimed)
        return out

    @property
    def losses(self) -> np.ndarray:
        return np.array([l for _, l in self.per_candidate_losses])

    @property
    def ks(self) -> np.ndarray:
        return np.array([k for k, _ in self.per_candidate_losses])


def circular_distance(a, b):
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    out = np.minimum(d, 360.0 - d)
    return float(out) if np.ndim(out) == 0 else out


def is_match(inferred: float, claimed: float, tau: float) -> bool:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return circular_distance(inferred, claimed) < tau


def linear_match(inferred: float, claimed: float, tau: float) -> bool:
    # rounding keeps grid neighbours exactly tau apart from matching by float noise
    return round(abs(inferred - claimed), 9) < tau


def _pick_min(ks, losses, distance_from_zero):
    losses = np.asarray(losses, dtype=np.float64)
    best = losses.min()
    tied = [i for i in range(len(ks)) if losses[i] == best]
    return min(tied, key=lambda i: (distance_from_zero(ks[i]), ks[i]))


def candidate_loss(model, images, labels, basis: ColorBasis, k: float, norm=CIFAR_NORM, rng=None) -> float:
    """Mean loss of the clean images watermarked (and clipped) with signature ``k``."""
    marked = apply_color_matrix(images, lct(WatermarkKey(basis, k)))
    return float(example_losses(model, marked, labels, norm, rng).mean())


def grid_search(
    model: Classifier,
    clean_images,
    labels,
    basis: ColorBasis,
    space: SignatureSpace = SignatureSpace(),
    norm: NormalizationSpec = CIFAR_NORM,
    rng=None,
) -> VerificationReport:
    clean_images = np.asarray(clean_images)
    if len(clean_images) == 0:
        raise ValueError("grid search needs at least one image")
    ks = space.candidates
    if len(ks) == 0:
        raise ValueError("no candidates to search")
    losses = [candidate_loss(model, clean_images, labels, basis, k, norm, rng) for k in ks]
    best = _pick_min(ks, losses, lambda k: circular_distance(k, 0.0))
    return VerificationReport(
        method="grid",
        inferred=float(ks[best]),
        tau=space.tau,
        per_candidate_losses=[(float(k), float(l)) for k, l in zip(ks, losses)],
        metadata={"image_count": int(len(clean_images)), "n": space.n},
    )


def signature_gradient(model, images, labels, basis: ColorBasis, k: float, norm=CIFAR_NORM, dtype=np.float64):
    """Summed loss over the images watermarked at ``k`` and its derivative in ``k`` (per degree).

    The clip is treated as identity on unsaturated pixels and as a zero
    gradient on saturated ones.
    """
    images = np.asarray(images, dtype=np.float64)
    key = WatermarkKey(basis, k)
    raw = images @ lct(key).T
    live = (raw > 0.0) & (raw < 1.0)
    x = normalize(np.clip(raw, 0.0, 1.0), norm, dtype=dtype)
    mean_loss, _, gx = backward(model, x, labels, need_input_grad=True, dtype=dtype)
    n = len(images)
    du = gx.astype(np.float64) * n / np.asarray(norm.std, dtype=np.float64) * live
    dk = float(np.sum(du * (images @ lct_derivative(key).T)))
    return mean_loss * n, dk


def gradient_search(
    model: Classifier,
    clean_images,
    labels,
    basis: ColorBasis,
    inits=None,
    schedule: GradientSchedule = GradientSchedule(),
    space: SignatureSpace = SignatureSpace(),
    norm: NormalizationSpec = CIFAR_NORM,
    dtype=np.float32,
) -> VerificationReport:
    """Multi-start gradient descent on the signature; returns the best terminal point."""
    clean_images = np.asarray(clean_images)
    if len(clean_images) == 0:
        raise ValueError("gradient search needs at least one image")
    inits = space.candidates if inits is None else np.atleast_1d(np.asarray(inits, dtype=np.float64))
    if len(inits) == 0:
        raise ValueError("gradient search needs at least one initial signature")
    finals = []
    for k0 in inits:
        k = float(k0)
        ok = True
        for it in range(schedule.iterations):
            _, dk = signature_gradient(model, clean_images, labels, basis, k, norm, dtype)
            if not np.isfinite(dk):
                ok = False
                break
            k -= schedule.lr_at(it) * dk
        if not ok:
            continue
        k %= 360.0
        loss = candidate_loss(model, clean_images, labels, basis, k, norm)
        if np.isfinite(loss):
            finals.append((k, loss, float(k0)))
    if not finals:
        raise NumericalError("every gradient-search trajectory diverged")
    best = _pick_min([f[0] for f in finals], [f[1] for f in finals], lambda k: circular_distance(k, 0.0))
    return VerificationReport(
        method="gradient",
        inferred=float(finals[best][0]),
        tau=space.tau,
        per_candidate_losses=[(k, l) for k, l, _ in finals],
        metadata={
            "image_count": int(len(clean_images)),
            "inits": [f[2] for f in finals],
            "iterations": schedule.iterations,
        },
    )


def verify(
    model: Classifier,
    clean_images,
    labels,
    basis: ColorBasis,
    space: SignatureSpace = SignatureSpace(),
    claimed: float | None = None,
    method: str = "grid",
    schedule: GradientSchedule = GradientSchedule(),
    norm: NormalizationSpec = CIFAR_NORM,
    metadata: dict | None = None,
) -> VerificationReport:
    """Infer the signature, then (only then) compare it with ``claimed``.

    ``method`` is ``grid``, ``gradient`` (multi-start from every candidate) or
    ``refine`` (grid, then gradient descent seeded at the grid winner).
    """
    if method == "grid":
        report = grid_search(model, clean_images, labels, basis, space, norm)
    elif method == "gradient":
        report = gradient_search(model, clean_images, labels, basis, None, schedule, space, norm)
    elif method == "refine":
        coarse = grid_search(model, clean_images, labels, basis, space, norm)
        fine = gradient_search(model, clean_images, labels, basis, [coarse.inferred], schedule, space, norm)
        report = VerificationReport(
            method="refine",
            inferred=fine.inferred,
            tau=space.tau,
            per_candidate_losses=coarse.per_candidate_losses,
            metadata={**coarse.metadata, "grid_inferred": coarse.inferred},
        )
    else:
        raise ValueError(f"unknown verification method {method!r}")
    report.metadata.update(metadata or {})
    if claimed is not None:
        report.claimed = float(claimed)
        report.matched = is_match(report.inferred, claimed, space.tau)
    return report


def blue_grid_search(
    model: Classifier,
    clean_images,
    labels,
    key: BlueChannelKey,
    alphas=np.round(np.arange(1, 10) * 0.1, 10),
    tau: float = 0.1,
    norm: NormalizationSpec = CIFAR_NORM,
) -> VerificationReport:
    """Linear grid over blue-channel intensities; ties go to the smaller alpha."""
    clean_images = np.asarray(clean_images)
    alphas = np.asarray(alphas, dtype=np.float64)
    losses = [
        float(example_losses(model, blue_channel_watermark(clean_images, key.with_alpha(a)), labels, norm).mean())
        for a in alphas
    ]
    best = _pick_min(alphas, losses, lambda a: a)
    return VerificationReport(
        method="grid-blue",
        inferred=float(alphas[best]),
        tau=tau,
        per_candidate_losses=[(float(a), l) for a, l in zip(alphas, losses)],
        metadata={"image_count": int(len(clean_images))},
    )
