"""Protection advantage, threshold membership inference, signature similarity, memorization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, derive_seed, make_rng, split_users
from .nn import accuracy
from .train import TrainConfig, train
from .verify import SignatureSpace, verify
from .watermark import ColorBasis, WatermarkKey, random_user_basis, yiq_matrix


@dataclass(frozen=True)
class BernoulliOutcome:
    M: int
    N: int
    p: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not 0 <= self.M <= self.N:
            raise ValueError("M must lie in [0, N]")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")


def protection_advantage(outcome: BernoulliOutcome) -> float:
    """(M - N p) / N: empirical success rate minus the random-guess rate."""
    return (outcome.M - outcome.N * outcome.p) / outcome.N


# -- membership inference ----------------------------------------------------

@dataclass(frozen=True)
class MiaThreshold:
    epsilon: float
    source: str
    accuracy: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.epsilon):
            raise ValueError("threshold must be finite")
        if self.source not in ("std", "pow"):
            raise ValueError(f"unknown threshold source {self.source!r}")


def mia_std_threshold(known_train_losses) -> MiaThreshold:
    losses = np.asarray(known_train_losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("need at least one known training loss")
    return MiaThreshold(float(losses.mean()), "std")


def mia_accuracy(epsilon: float, train_losses, heldout_losses) -> float:
    tr = np.asarray(train_losses, dtype=np.float64)
    ho = np.asarray(heldout_losses, dtype=np.float64)
    hits = np.count_nonzero(tr < epsilon) + np.count_nonzero(ho >= epsilon)
    return hits / (tr.size + ho.size)


def mia_pow_threshold(train_losses, heldout_losses) -> MiaThreshold:
    """Accuracy-maximizing threshold among midpoints of the sorted pooled losses.

    The two sentinels below and above every loss are also candidates, so a
    degenerate all-in / all-out rule is always available.  Ties go to the
    smaller threshold.
    """
    tr = np.asarray(train_losses, dtype=np.float64)
    ho = np.asarray(heldout_losses, dtype=np.float64)
    if tr.size == 0 or ho.size == 0:
        raise ValueError("need both training and held-out losses")
    pooled = np.unique(np.concatenate([tr, ho]))
    mids = (pooled[:-1] + pooled[1:]) / 2
    cands = np.concatenate([[pooled[0] - 1.0], mids, [pooled[-1] + 1.0]])
    accs = [mia_accuracy(e, tr, ho) for e in cands]
    best = int(np.argmax(accs))  # first maximum = smallest epsilon
    return MiaThreshold(float(cands[best]), "pow", float(accs[best]))


def mia_infer(loss: float, threshold: MiaThreshold) -> bool:
    return loss < threshold.epsilon


def signature_cosine(inferred_degrees, true_degrees):
    out = np.cos(np.deg2rad(np.asarray(inferred_degrees, dtype=np.float64) - np.asarray(true_degrees, dtype=np.float64)))
    return float(out) if np.ndim(out) == 0 else out


# -- memorization ------------------------------------------------------------

@dataclass(frozen=True)
class MaeConfig:
    num_models: int
    user_indices: tuple
    subset_fraction: float = 0.7
    train_config: TrainConfig = TrainConfig()
    seed: int = 0

    def __post_init__(self):
        if self.num_models < 2:
            raise ValueError("need at least two models")
        if self.num_models % 2:
            raise ValueError("num_models must be even so both groups get K/2 models")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must lie in (0, 1]")
        if len(self.user_indices) == 0:
            raise ValueError("the user partition is empty")
        object.__setattr__(self, "user_indices", tuple(int(i) for i in self.user_indices))


def memorization_estimate(dataset: LabeledDataset, config: MaeConfig, details: dict | None = None) -> float:
    """Mean user-data accuracy of models trained with the user minus models trained without.

    Each model draws its own ``subset_fraction`` share of the non-user data;
    the first K/2 models add the user partition, the rest leave it out.  User
    accuracy is measured on the user images exactly as stored in ``dataset``.
    """
    user = np.asarray(config.user_indices)
    if user.min() < 0 or user.max() >= len(dataset):
        raise IndexError("user index out of range")
    others = np.setdiff1d(np.arange(len(dataset)), user)
    take = max(1, int(round(config.subset_fraction * len(others))))
    user_set = dataset.subset(user)
    accs = {True: [], False: []}
    for m in range(config.num_models):
        include = m < config.num_models // 2
        rng = make_rng(derive_seed(config.seed, "mae-subset", m))
        idx = np.sort(rng.choice(others, size=take, replace=False))
        if include:
            idx = np.sort(np.concatenate([idx, user]))
        cfg = config.train_config.with_(seed=derive_seed(config.seed, "mae-train", m))
        model = train(dataset.subset(idx), config=cfg).model
        accs[include].append(accuracy(model, user_set.images, user_set.labels, cfg.norm))
    if details is not None:
        details["with_user"] = accs[True]
        details["without_user"] = accs[False]
    return float(np.mean(accs[True]) - np.mean(accs[False]))


# -- multi-user --------------------------------------------------------------

@dataclass
class MultiuserSummary:
    num_users: int
    watermark_ratio: float
    shared_basis: bool
    users: list = field(default_factory=list)
    attack: list = field(default_factory=list)
    note: str = ""

    @property
    def match_rate(self) -> float | None:
        return None if not self.users else float(np.mean([u["matched"] for u in self.users]))

    @property
    def attack_match_rate(self) -> float | None:
        return None if not self.attack else float(np.mean([u["matched"] for u in self.attack]))

    def to_json(self) -> dict:
        return {
            "num_users": self.num_users,
            "watermark_ratio": self.watermark_ratio,
            "shared_basis": self.shared_basis,
            "match_rate": self.match_rate,
            "attack_match_rate": self.attack_match_rate,
            "users": self.users,
            "attack": self.attack,
            "note": self.note,
        }


def multiuser_experiment(
    dataset: LabeledDataset,
    num_users: int,
    watermark_ratio: float,
    shared_basis: bool,
    space: SignatureSpace = SignatureSpace(),
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    attack: bool = True,
    method: str = "grid",
) -> MultiuserSummary:
    """Split ``dataset`` among users, watermark a share of them, train once, verify each.

    With ``shared_basis`` every watermarking user uses the YIQ basis;
    otherwise each draws a random basis.  The arbitrary-basis attack verifies
    every watermarking user with a fresh random basis instead of theirs.
    """
    if not 0 <= watermark_ratio <= 1:
        raise ValueError("watermark_ratio must lie in [0, 1]")
    parts = split_users(dataset, num_users, derive_seed(seed, "users"))
    count = int(round(watermark_ratio * num_users))
    summary = MultiuserSummary(num_users, watermark_ratio, shared_basis)
    if count == 0:
        summary.note = "no watermarking users; nothing to verify"
        return summary
    rng = make_rng(derive_seed(seed, "multiuser"))
    chosen = sorted(rng.choice(num_users, size=count, replace=False).tolist())
    keys = {}
    for uid in chosen:
        k = float(rng.choice(space.signatures))
        basis = yiq_matrix() if shared_basis else random_user_basis(rng)
        keys[uid] = WatermarkKey(basis, k)
    model = train(dataset, parts, keys, config).model
    by_id = {p.user_id: p for p in parts}
    attack_rng = make_rng(derive_seed(seed, "attack"))
    for uid in chosen:
        sub = dataset.subset(by_id[uid].indices)
        key = keys[uid]
        rep = verify(model, sub.images, sub.labels, key.basis, space, claimed=key.signature, method=method, norm=config.norm)
        summary.users.append({"user": uid, "signature": key.signature, "inferred": rep.inferred, "matched": bool(rep.matched)})
        if attack:
            fake = _fresh_basis(attack_rng, key.basis)
            rep = verify(model, sub.images, sub.labels, fake, space, claimed=key.signature, method=method, norm=config.norm)
            summary.attack.append({"user": uid, "signature": key.signature, "inferred": rep.inferred, "matched": bool(rep.matched)})
    return summary


def _fresh_basis(rng, avoid: ColorBasis) -> ColorBasis:
    while True:
        b = random_user_basis(rng)
        if not np.array_equal(b.matrix, avoid.matrix):
            return b

