"""SGD training loop, watermark injection into the learner's data, fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .augment import AugmentationPipeline, JitterRanges
from .data import LabeledDataset, NormalizationSpec, derive_seed, make_rng, normalize
from .errors import NumericalError
from .nn import Classifier, accuracy, backward, build_tiny_cnn, fgsm_perturb
from .watermark import BlueChannelKey, WatermarkKey, blue_channel_watermark, watermark_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0  # global L2 norm; 0 disables
    warmup_epochs: float = 0.0  # linear lr ramp over this many epochs of steps
    batch_size: int = 64
    seed: int = 0
    width: int = 16
    crop_pad: int = 0
    flip: bool = False
    cutout: int = 0
    label_smoothing: float = 0.0
    noise_sigma2: float = 0.0
    fgsm_epsilon: float = 0.0
    jitter: JitterRanges = JitterRanges()
    dp_sigma2: float = 0.0
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.epochs < 1 or self.lr_decay_every < 1 or self.batch_size < 1:
            raise ValueError("epochs, lr_decay_every and batch_size must be >= 1")
        if isinstance(self.jitter, dict):
            object.__setattr__(self, "jitter", JitterRanges(**self.jitter))
        object.__setattr__(self, "norm_mean", tuple(self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(self.norm_std))

    @property
    def norm(self) -> NormalizationSpec:
        return NormalizationSpec(self.norm_mean, self.norm_std)

    @property
    def augmentation(self) -> AugmentationPipeline:
        return AugmentationPipeline(self.crop_pad, self.flip, self.cutout, self.jitter, self.noise_sigma2)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_json(self) -> dict:
        out = asdict(self)
        if not self.warmup_epochs:
            # omitted at its default so checkpoint hashes of older configs still hold
            del out["warmup_epochs"]
        out["norm_mean"] = list(self.norm_mean)
        out["norm_std"] = list(self.norm_std)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**obj)

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)


@dataclass
class TrainResult:
    model: Classifier
    log: list = field(default_factory=list)
    train_set: LabeledDataset | None = None


def apply_watermarks(dataset: LabeledDataset, partitions, assignments) -> LabeledDataset:
    """Watermark each assigned user's slice once; unassigned users stay clean."""
    if not assignments:
        return dataset
    by_id = {p.user_id: p for p in partitions}
    images = dataset.images.copy()
    for uid, key in sorted(assignments.items()):
        if key is None:
            continue
        idx = by_id[uid].indices
        if isinstance(key, BlueChannelKey):
            images[idx] = blue_channel_watermark(dataset.images[idx], key)
        elif isinstance(key, WatermarkKey):
            images[idx] = watermark_image(dataset.images[idx], key)
        else:
            raise TypeError(f"unsupported key type {type(key).__name__}")
    return LabeledDataset(images, dataset.labels, dataset.num_classes)


def _sgd_epochs(model, dataset, config: TrainConfig, epochs, lr_fn, eval_set=None, history=None, seed_tag=1):
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    norm = config.norm
    pipeline = config.augmentation
    n = len(dataset)
    history = [] if history is None else history
    warmup_steps = config.warmup_epochs * -(-n // config.batch_size)
    step = 0
    for epoch in range(epochs):
        lr = lr_fn(epoch)
        rng = make_rng(derive_seed(config.seed, seed_tag, epoch))
        order = rng.permutation(n)
        total, hits = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = pipeline.apply_batch(dataset.images[idx], rng)
            y = dataset.labels[idx]
            if config.fgsm_epsilon > 0:
                x = fgsm_perturb(model, x, y, config.fgsm_epsilon, norm)
            loss, grads, _ = backward(model, normalize(x, norm), y, config.label_smoothing, need_input_grad=False)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            if config.grad_clip:
                gnorm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                if gnorm > config.grad_clip:
                    grads = [g * np.float32(config.grad_clip / gnorm) for g in grads]
            step += 1
            step_lr = lr * min(1.0, step / warmup_steps) if warmup_steps else lr
            for p, g, v in zip(params, grads, velocity):
                if config.weight_decay:
                    g = g + config.weight_decay * p
                v *= config.momentum
                v += g
                p -= np.float32(step_lr) * v
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / n}
        if eval_set is not None:
            entry["eval_acc"] = accuracy(model, eval_set.images, eval_set.labels, norm)
        history.append(entry)
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, entry["train_loss"])
    return history


def train(
    dataset: LabeledDataset,
    user_partitions=(),
    watermark_assignments=None,
    config: TrainConfig = TrainConfig(),
    eval_set: LabeledDataset | None = None,
) -> TrainResult:
    """Train a tiny CNN from scratch on ``dataset`` with user watermarks applied.

    Watermarking happens once, before training; augmentation and
    normalization are applied per batch afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    train_set = apply_watermarks(dataset, user_partitions, watermark_assignments)
    model = build_tiny_cnn((3, dataset.height, dataset.width), dataset.num_classes, derive_seed(config.seed, 0), config.width)
    history = _sgd_epochs(model, train_set, config, config.epochs, config.lr_at, eval_set)
    model.output_noise_sigma2 = config.dp_sigma2
    return TrainResult(model, history, train_set)


def fine_tune(model: Classifier, dataset: LabeledDataset, epochs: int, lr: float, config: TrainConfig = TrainConfig()) -> Classifier:
    """Continue SGD at a constant ``lr`` on (clean) ``dataset``; returns a new model."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    out = model.copy()
    _sgd_epochs(out, dataset, config, epochs, lambda _e: lr, seed_tag=2)
    return out
