"""Desk-scale experiment drivers shared by the CLI and the acceptance tests.

Every driver is deterministic in its seed.  Trained models can be cached on
disk (keyed by a hash of everything that determines the weights) so that
experiments sharing a configuration train it only once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import HUE_JITTER_DEFAULT, JitterRanges
from .data import LabeledDataset, UserPartition, derive_seed, generate_synthetic, make_rng, train_test_split
from .metrics import (
    BernoulliOutcome,
    MaeConfig,
    memorization_estimate,
    mia_pow_threshold,
    mia_std_threshold,
    multiuser_experiment,
    protection_advantage,
    signature_cosine,
)
from .nn import Classifier, accuracy, example_losses, load_checkpoint, prune, save_checkpoint
from .train import TrainConfig, fine_tune, train
from .verify import SignatureSpace, blue_grid_search, is_match, linear_match, verify
from .watermark import BlueChannelKey, ColorBasis, WatermarkKey, random_blue_key, watermark_image, yiq_matrix

log = logging.getLogger(__name__)

EXPERIMENTS = ("recovery", "quantity", "signatures", "augmentations", "defenses", "multiuser", "mia", "mae", "heldout", "blue")


@dataclass(frozen=True)
class DeskSetup:
    """Synthetic dataset plus the learner/held-out split used by the desk runs."""

    num_images: int = 5000
    height: int = 32
    width: int = 32
    num_classes: int = 10
    heldout_fraction: float = 0.2
    user_share: float = 0.01

    def to_json(self) -> dict:
        return dict(self.__dict__)

    def data(self, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
        ds = generate_synthetic(self.num_images, self.height, self.width, self.num_classes, seed=derive_seed(seed, "data"))
        return train_test_split(ds, self.heldout_fraction, derive_seed(seed, "split"))

    def user_count(self, train_size: int) -> int:
        return max(1, int(round(self.user_share * train_size)))


class ModelCache:
    """Checkpoints on disk keyed by a JSON description of how they were trained."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(desc: dict) -> str:
        return hashlib.sha256(json.dumps(desc, sort_keys=True, default=str).encode()).hexdigest()[:24]

    def get_or_train(self, desc: dict, builder) -> tuple[Classifier, float]:
        """The cached model (or a freshly built one) and the seconds its training took."""
        path = self.root / f"{self.key(desc)}.anwm"
        meta = path.with_suffix(".json")
        if path.exists() and meta.exists():
            return load_checkpoint(path), float(json.loads(meta.read_text()).get("train_seconds", 0.0))
        t0 = time.perf_counter()
        model = builder()
        seconds = time.perf_counter() - t0
        save_checkpoint(model, path)
        meta.write_text(json.dumps({**desc, "train_seconds": seconds}, sort_keys=True, default=str, indent=1))
        return model, seconds


def _train_cached(cache, desc, dataset, partitions, assignments, config) -> tuple[Classifier, float]:
    def build():
        return train(dataset, partitions, assignments, config).model

    if cache is None:
        t0 = time.perf_counter()
        model = build()
        seconds = time.perf_counter() - t0
    else:
        model, seconds = cache.get_or_train(desc, build)
    model.output_noise_sigma2 = config.dp_sigma2
    return model, seconds


def _key_desc(key) -> dict | None:
    if key is None:
        return None
    if isinstance(key, BlueChannelKey):
        return {"blue": key.to_json()}
    return key.to_json()


@dataclass
class RecoveryRun:
    seed: int
    model: Classifier
    train_set: LabeledDataset
    heldout_set: LabeledDataset
    watermark_indices: np.ndarray
    clean_indices: np.ndarray
    key: object
    config: TrainConfig
    space: SignatureSpace
    seconds: float = 0.0
    train_seconds: float = 0.0
    reports: dict = field(default_factory=dict)

    def user(self, which: str) -> LabeledDataset:
        if which == "watermarked":
            return self.train_set.subset(self.watermark_indices)
        if which == "clean":
            return self.train_set.subset(self.clean_indices)
        if which == "heldout":
            return self.heldout_set.subset(np.arange(min(len(self.clean_indices), len(self.heldout_set))))
        raise ValueError(which)


def recovery_run(
    seed: int,
    signature: float | None = 60.0,
    num_watermarked: int | None = None,
    basis: ColorBasis | None = None,
    config: TrainConfig | None = None,
    setup: DeskSetup = DeskSetup(),
    space: SignatureSpace = SignatureSpace(),
    cache: ModelCache | None = None,
    method: str = "grid",
    key=None,
) -> RecoveryRun:
    """Train on the desk dataset with one watermarking user, then verify three users.

    The watermarking user, a second (clean) user of the same size and a
    held-out user drawn from data the learner never saw are each verified
    with the watermark basis.  ``key`` overrides the hue key (for the
    blue-channel variant).
    """
    t0 = time.perf_counter()
    config = (config or TrainConfig()).with_(seed=seed)
    train_set, heldout = setup.data(seed)
    count = setup.user_count(len(train_set)) if num_watermarked is None else num_watermarked
    rng = make_rng(derive_seed(seed, "users"))
    ref = setup.user_count(len(train_set))
    picks = rng.permutation(len(train_set))
    wm_idx = np.sort(picks[:count])
    clean_idx = np.sort(picks[count:count + max(ref, 1)])
    basis = basis or yiq_matrix()
    if key is None and signature is not None:
        key = WatermarkKey(basis, float(signature))
    parts = [UserPartition(0, wm_idx), UserPartition(1, clean_idx)]
    desc = {
        "kind": "recovery",
        "setup": setup.to_json(),
        "seed": seed,
        "count": count,
        "key": _key_desc(key),
        "config": config.with_(dp_sigma2=0.0).to_json(),  # output noise does not touch the weights
    }
    t_train = time.perf_counter()
    model, train_seconds = _train_cached(cache, desc, train_set, parts, {0: key}, config)
    t_train = time.perf_counter() - t_train
    run = RecoveryRun(seed, model, train_set, heldout, wm_idx, clean_idx, key, config, space, train_seconds=train_seconds)
    if not isinstance(key, BlueChannelKey):
        for name in ("watermarked", "clean", "heldout"):
            u = run.user(name)
            run.reports[name] = verify(model, u.images, u.labels, basis, space, claimed=signature if name == "watermarked" else None, method=method, norm=config.norm)
    # on a cache hit the recorded training time replaces the load time
    run.seconds = time.perf_counter() - t0 - t_train + train_seconds
    return run


def _report_row(report) -> dict:
    return {"inferred": report.inferred, "matched": report.matched, "losses": [float(x) for x in report.losses]}


def loss_gap(report) -> float:
    """Mean loss over the non-winning candidates minus the winning loss."""
    losses = report.losses
    best = int(np.argmin(losses))
    return float(np.delete(losses, best).mean() - losses[best])


# -- drivers -----------------------------------------------------------------

def exp_recovery(seeds=range(10), signature=60.0, cache=None, setup=DeskSetup(), config=None, space=SignatureSpace()) -> dict:
    rows = []
    for s in seeds:
        run = recovery_run(s, signature, setup=setup, config=config, space=space, cache=cache)
        rows.append({
            "seed": s,
            "seconds": run.seconds,
            "watermarked": _report_row(run.reports["watermarked"]),
            "clean_inferred": run.reports["clean"].inferred,
            "heldout_inferred": run.reports["heldout"].inferred,
            "heldout_accuracy": accuracy(run.model, run.heldout_set.images, run.heldout_set.labels, run.config.norm),
        })
    n = len(rows)
    matches = sum(r["watermarked"]["matched"] for r in rows)
    innocent = sum(is_match(r["clean_inferred"], 0.0, space.tau) for r in rows)
    return {
        "experiment": "recovery",
        "signature": signature,
        "runs": rows,
        "match_rate": matches / n,
        "innocence_rate": innocent / n,
        "heldout_innocence_rate": sum(is_match(r["heldout_inferred"], 0.0, space.tau) for r in rows) / n,
        "adv_p": protection_advantage(BernoulliOutcome(matches, n, 1.0 / space.n)),
        "mean_cosine": float(np.mean([signature_cosine(r["watermarked"]["inferred"], signature) for r in rows])),
        "mean_heldout_accuracy": float(np.mean([r["heldout_accuracy"] for r in rows])),
    }


def exp_quantity(counts=(1, 5, 10, 50, 100), seed=0, signature=60.0, cache=None, setup=DeskSetup(), config=None) -> dict:
    rows = []
    for c in counts:
        run = recovery_run(seed, signature, num_watermarked=c, setup=setup, config=config, cache=cache)
        rows.append({"count": c, **_report_row(run.reports["watermarked"])})
    return {"experiment": "quantity", "signature": signature, "runs": rows}


def exp_signatures(signatures=None, seed=0, cache=None, setup=DeskSetup(), config=None, space=SignatureSpace()) -> dict:
    signatures = space.signatures if signatures is None else signatures
    rows = []
    for k in signatures:
        run = recovery_run(seed, float(k), setup=setup, config=config, space=space, cache=cache)
        rows.append({"signature": float(k), **_report_row(run.reports["watermarked"])})
    return {"experiment": "signatures", "runs": rows, "match_rate": float(np.mean([r["matched"] for r in rows]))}


AUGMENTATION_VARIANTS = {
    "cutout": {"cutout": 8},
    "label_smoothing": {"label_smoothing": 0.1},
    # noisy and adversarial inputs collapse the untuned net at full lr without a ramp
    "gaussian_noise": {"noise_sigma2": 0.1, "warmup_epochs": 2},
    "fgsm": {"fgsm_epsilon": 0.01, "warmup_epochs": 2},
    "dp_output_noise": {"dp_sigma2": 0.1},
}
HUE_JITTER_VARIANT = {"jitter": JitterRanges(hue=HUE_JITTER_DEFAULT)}


def exp_augmentations(seed=0, signature=60.0, cache=None, setup=DeskSetup(), config=None, variants=None) -> dict:
    base_cfg = config or TrainConfig()
    variants = dict(AUGMENTATION_VARIANTS) if variants is None else variants
    baseline = recovery_run(seed, signature, setup=setup, config=base_cfg, cache=cache)
    rows = {"baseline": {**_report_row(baseline.reports["watermarked"]), "loss_gap": loss_gap(baseline.reports["watermarked"])}}
    for name, change in variants.items():
        run = recovery_run(seed, signature, setup=setup, config=base_cfg.with_(**change), cache=cache)
        rows[name] = {**_report_row(run.reports["watermarked"]), "loss_gap": loss_gap(run.reports["watermarked"])}
    jit = recovery_run(seed, signature, setup=setup, config=base_cfg.with_(**HUE_JITTER_VARIANT), cache=cache)
    rows["hue_jitter"] = {**_report_row(jit.reports["watermarked"]), "loss_gap": loss_gap(jit.reports["watermarked"])}
    return {"experiment": "augmentations", "runs": rows}


def exp_defenses(seed=0, signature=60.0, cache=None, setup=DeskSetup(), config=None, prune_fraction=0.3,
                 finetune_epochs=5, finetune_lr=0.01, finetune_share=0.1) -> dict:
    run = recovery_run(seed, signature, setup=setup, config=config, cache=cache)
    u = run.user("watermarked")
    basis = run.key.basis
    pruned = prune(run.model, prune_fraction)
    rep_p = verify(pruned, u.images, u.labels, basis, run.space, claimed=signature, norm=run.config.norm)
    # clean fine-tuning data: a share of the learner's data the user never contributed to
    rng = make_rng(derive_seed(seed, "finetune"))
    pool = np.setdiff1d(np.arange(len(run.train_set)), run.watermark_indices)
    ft_idx = np.sort(rng.choice(pool, size=max(1, int(round(finetune_share * len(run.train_set)))), replace=False))
    tuned = fine_tune(run.model, run.train_set.subset(ft_idx), finetune_epochs, finetune_lr, run.config)
    rep_f = verify(tuned, u.images, u.labels, basis, run.space, claimed=signature, norm=run.config.norm)
    return {
        "experiment": "defenses",
        "baseline": _report_row(run.reports["watermarked"]),
        "pruning": {"fraction": prune_fraction, **_report_row(rep_p)},
        "fine_tuning": {"epochs": finetune_epochs, "lr": finetune_lr, "images": int(len(ft_idx)), **_report_row(rep_f)},
    }


def exp_multiuser(seed=0, num_users=20, ratio=1.0, setup=DeskSetup(), config=None, space=SignatureSpace()) -> dict:
    config = (config or TrainConfig()).with_(seed=seed)
    train_set, _ = setup.data(seed)
    out = {"experiment": "multiuser", "num_users": num_users, "ratio": ratio}
    for shared in (True, False):
        s = multiuser_experiment(train_set, num_users, ratio, shared, space, config, seed=seed, attack=not shared)
        out["shared" if shared else "user_specific"] = s.to_json()
    return out


def exp_heldout(seed=0, signature=60.0, users=10, cache=None, setup=DeskSetup(), config=None, space=SignatureSpace()) -> dict:
    run = recovery_run(seed, signature, setup=setup, config=config, cache=cache)
    size = len(run.watermark_indices)
    rows = []
    for u in range(users):
        idx = np.arange(u * size, (u + 1) * size)
        if idx[-1] >= len(run.heldout_set):
            break
        sub = run.heldout_set.subset(idx)
        rep = verify(run.model, sub.images, sub.labels, run.key.basis, space, norm=run.config.norm)
        rows.append({"user": u, "inferred": rep.inferred, "near_zero": is_match(rep.inferred, 0.0, space.tau)})
    return {"experiment": "heldout", "users": rows, "near_zero_rate": float(np.mean([r["near_zero"] for r in rows]))}


def exp_mia(seed=0, num_users=10, user_size=50, known=100, setup=DeskSetup(), config=None, space=SignatureSpace(), cache=None) -> dict:
    """Users publish watermarked data; half of them end up in the learner's training set.

    MIA-std thresholds come from shadow models each user trains on their own
    data.  MIA-pow gets ``known`` learner-training and held-out samples.  ANW
    decides membership per user by whether the inferred signature matches.
    """
    config = (config or TrainConfig()).with_(seed=seed)
    train_set, heldout = setup.data(seed)
    rng = make_rng(derive_seed(seed, "mia"))
    members = num_users // 2
    train_pick = rng.permutation(len(train_set))
    held_pick = rng.permutation(len(heldout))
    sigs = rng.choice(space.signatures, size=num_users, replace=True)
    users = []
    for u in range(num_users):
        member = u < members
        if member:
            idx = np.sort(train_pick[u * user_size:(u + 1) * user_size])
        else:
            j = u - members
            idx = np.sort(held_pick[j * user_size:(j + 1) * user_size])
        users.append({"user": u, "member": member, "indices": idx, "key": WatermarkKey(yiq_matrix(), float(sigs[u]))})
    parts = [UserPartition(u["user"], u["indices"]) for u in users if u["member"]]
    assign = {u["user"]: u["key"] for u in users if u["member"]}
    desc = {"kind": "mia", "setup": setup.to_json(), "seed": seed, "users": num_users, "size": user_size,
            "sigs": [float(s) for s in sigs], "config": config.to_json()}
    model, _ = _train_cached(cache, desc, train_set, parts, assign, config)

    std_hits = std_total = pow_hits = anw_hits = 0
    heldout_in = heldout_total = 0
    rows = []
    known_tr = train_set.subset(train_pick[-known:])
    known_ho = heldout.subset(held_pick[-known:])
    pow_thr = mia_pow_threshold(
        example_losses(model, known_tr.images, known_tr.labels, config.norm),
        example_losses(model, known_ho.images, known_ho.labels, config.norm),
    )
    for u in users:
        source = train_set if u["member"] else heldout
        clean = source.subset(u["indices"])
        published = clean.replace_images(np.arange(len(clean)), watermark_image(clean.images, u["key"]))
        shadow_cfg = config.with_(seed=derive_seed(seed, "shadow", u["user"]))
        shadow = train(published, config=shadow_cfg).model
        std_thr = mia_std_threshold(example_losses(shadow, published.images, published.labels, config.norm))
        learner_losses = example_losses(model, published.images, published.labels, config.norm)
        said_in = learner_losses < std_thr.epsilon
        pow_in = learner_losses < pow_thr.epsilon
        truth = u["member"]
        std_hits += int(np.sum(said_in == truth))
        pow_hits += int(np.sum(pow_in == truth))
        std_total += len(said_in)
        if not truth:
            heldout_in += int(np.sum(said_in))
            heldout_total += len(said_in)
        rep = verify(model, clean.images, clean.labels, u["key"].basis, space, claimed=u["key"].signature, norm=config.norm)
        anw_hits += int(bool(rep.matched) == truth)
        rows.append({
            "user": u["user"], "member": truth, "signature": u["key"].signature, "inferred": rep.inferred,
            "matched": bool(rep.matched), "std_epsilon": std_thr.epsilon,
            "learner_loss_mean": float(learner_losses.mean()), "std_in_fraction": float(said_in.mean()),
        })
    std_acc = std_hits / std_total
    anw_acc = anw_hits / num_users
    return {
        "experiment": "mia",
        "users": rows,
        "mia_std_accuracy": std_acc,
        "mia_pow_accuracy": pow_hits / std_total,
        "mia_pow_epsilon": pow_thr.epsilon,
        "anw_accuracy": anw_acc,
        "heldout_called_member": heldout_in / max(heldout_total, 1),
        "adv_p_anw": protection_advantage(BernoulliOutcome(anw_hits, num_users, 0.5)),
        "adv_p_mia_std": protection_advantage(BernoulliOutcome(std_hits, std_total, 0.5)),
        "mia_pow_known_accuracy": pow_thr.accuracy,
    }


def exp_mae(seed=0, num_models=8, signature=60.0, num_images=2000, size=16, user_size=50, config=None,
            subset_fraction=0.7) -> dict:
    """Memorization of one user's data, watermarked versus clean, on a smaller desk dataset."""
    config = (config or TrainConfig()).with_(seed=seed)
    train_set = generate_synthetic(num_images, size, size, 10, seed=derive_seed(seed, "mae-data"))
    rng = make_rng(derive_seed(seed, "mae-user"))
    user = np.sort(rng.choice(len(train_set), size=user_size, replace=False))
    key = WatermarkKey(yiq_matrix(), signature)
    marked = train_set.replace_images(user, watermark_image(train_set.images[user], key))
    out = {"experiment": "mae", "num_models": num_models, "user_size": int(len(user))}
    for name, ds in (("clean", train_set), ("watermarked", marked)):
        details = {}
        cfg = MaeConfig(num_models, tuple(user), subset_fraction, config, seed)
        out[name] = {"mae": memorization_estimate(ds, cfg, details), **details}
    return out


def exp_blue(seed=0, alpha=0.3, pixels=512, cache=None, setup=DeskSetup(), config=None) -> dict:
    key = random_blue_key(setup.height, setup.width, pixels, alpha, derive_seed(seed, "blue"))
    run = recovery_run(seed, None, setup=setup, config=config, cache=cache, key=key)
    u = run.user("watermarked")
    rep = blue_grid_search(run.model, u.images, u.labels, key, norm=run.config.norm)
    matched = linear_match(rep.inferred, alpha, rep.tau)
    return {"experiment": "blue", "alpha": alpha, "pixels": pixels, "inferred": rep.inferred, "matched": matched,
            "losses": [float(x) for x in rep.losses]}


def run_experiment(name: str, **kwargs) -> dict:
    drivers = {
        "recovery": exp_recovery, "quantity": exp_quantity, "signatures": exp_signatures,
        "augmentations": exp_augmentations, "defenses": exp_defenses, "multiuser": exp_multiuser,
        "mia": exp_mia, "mae": exp_mae, "heldout": exp_heldout, "blue": exp_blue,
    }
    if name not in drivers:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return drivers[name](**kwargs)
