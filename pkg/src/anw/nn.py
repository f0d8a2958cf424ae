"""A small convolutional classifier with hand-written backpropagation.

Activations use channels-last layout ``(n, H, W, C)``.  Parameters are
stored as float32; every forward/backward pass takes a ``dtype`` so gradient
checks can run the same code in float64.

Conv weights are kept as ``(C_out, C_in, 3, 3)`` and fully-connected weights
as ``(out, in)``, which is also how they are laid out in checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .data import make_rng
from .errors import FormatError

CONV, RELU, MAXPOOL, FLATTEN, FC = 0, 1, 2, 3, 4
CKPT_MAGIC = b"ANWM"
CKPT_VERSION = 1


class Conv3x3:
    kind = CONV

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.weight.shape[1]:
            raise ValueError(f"conv expects {self.weight.shape[1]} channels, got {c}")
        return (h, w, self.weight.shape[0])

    def _matrix(self, dtype):
        # rows ordered (dy, dx, c_in) to match _im2col
        return self.weight.transpose(2, 3, 1, 0).reshape(-1, self.weight.shape[0]).astype(dtype, copy=False)

    def forward(self, x, dtype):
        n, h, w, _ = x.shape
        cols = _im2col(x)
        y = cols.reshape(n * h * w, -1) @ self._matrix(dtype)
        y += self.bias.astype(dtype)
        return y.reshape(n, h, w, -1), cols

    def backward(self, g, cols, need_input_grad):
        n, h, w, cout = g.shape
        g2 = g.reshape(-1, cout)
        gw = cols.reshape(n * h * w, -1).T @ g2
        cin = self.weight.shape[1]
        gw = gw.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
        gb = g2.sum(axis=0)
        gx = None
        if need_input_grad:
            # full correlation of the output gradient with the flipped kernel
            flipped = self.weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, cin)
            gx = (_im2col(g).reshape(n * h * w, -1) @ flipped.astype(g.dtype, copy=False)).reshape(n, h, w, cin)
        return gx, [gw, gb]


class ReLU:
    kind = RELU
    params: list = []

    def out_shape(self, shape):
        return shape

    def forward(self, x, dtype):
        y = np.maximum(x, 0)
        return y, y

    def backward(self, g, y, need_input_grad):
        return g * (y > 0), []


class MaxPool2:
    kind = MAXPOOL
    params: list = []

    def out_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ValueError("maxpool needs even spatial dimensions")
        return (h // 2, w // 2, c)

    def forward(self, x, dtype):
        top = np.maximum(x[:, 0::2], x[:, 1::2])
        best = np.maximum(top[:, :, 0::2], top[:, :, 1::2])
        return best, (x, best)

    def backward(self, g, cache, need_input_grad):
        # gradient goes to every input equal to the window max; below a ReLU
        # the only ties are zeros, whose upstream gradient vanishes anyway
        x, best = cache
        n, h, w, c = x.shape
        x6 = x.reshape(n, h // 2, 2, w // 2, 2, c)
        hit = x6 == best[:, :, None, :, None, :]
        return (hit * g[:, :, None, :, None, :]).reshape(n, h, w, c), []


class Flatten:
    kind = FLATTEN
    params: list = []

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, dtype):
        return x.reshape(len(x), -1), x.shape

    def backward(self, g, shape, need_input_grad):
        return g.reshape(shape), []


class Dense:
    kind = FC

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise ValueError(f"fc expects {self.weight.shape[1]} inputs, got {shape}")
        return (self.weight.shape[0],)

    def forward(self, x, dtype):
        return x @ self.weight.T.astype(dtype, copy=False) + self.bias.astype(dtype), x

    def backward(self, g, x, need_input_grad):
        gx = g @ self.weight.astype(g.dtype, copy=False) if need_input_grad else None
        return gx, [g.T @ x, g.sum(axis=0)]


def _im2col(x):
    """(n, H, W, C) -> (n, H, W, 9C) patches of a zero-padded 3x3 window, ordered (dy, dx, c)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    s = xp.strides
    # (dx, c) of one window row is contiguous in the padded buffer
    view = as_strided(xp, shape=(n, h, w, 3, 3 * c), strides=(s[0], s[1], s[2], s[1], s[3]), writeable=False)
    return view.reshape(n, h, w, 9 * c)


class Classifier:
    """An ordered stack of layers mapping ``(n, H, W, 3)`` inputs to logits.

    ``output_noise_sigma2`` models a deployment that perturbs the output
    confidences with Gaussian noise (the output-noise privacy variant); it
    only affects :func:`predict_proba` and :func:`average_loss`.
    """

    def __init__(self, layers, input_hw, num_classes, output_noise_sigma2=0.0):
        self.layers = list(layers)
        self.input_hw = tuple(int(v) for v in input_hw)
        self.num_classes = int(num_classes)
        self.output_noise_sigma2 = float(output_noise_sigma2)
        shape = (*self.input_hw, 3)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"layers produce {shape}, expected ({self.num_classes},)")

    @property
    def input_shape(self):
        return (3, *self.input_hw)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def weight_tensors(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers if layer.params]

    def copy(self) -> Classifier:
        layers = []
        for layer in self.layers:
            if layer.params:
                layers.append(type(layer)(layer.weight.copy(), layer.bias.copy()))
            else:
                layers.append(type(layer)())
        return Classifier(layers, self.input_hw, self.num_classes, self.output_noise_sigma2)

    def equals(self, other: Classifier) -> bool:
        if [l.kind for l in self.layers] != [l.kind for l in other.layers]:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.parameters(), other.parameters())
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())


def build_tiny_cnn(input_shape=(3, 32, 32), num_classes=10, seed=0, width=16) -> Classifier:
    """conv(3->w) relu pool conv(w->2w) relu pool flatten fc, He-uniform weights, zero biases."""
    c, h, w = input_shape
    if c != 3:
        raise ValueError("input must have 3 channels")
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise ValueError("height and width must be >= 8 and divisible by 4")
    if num_classes < 1 or width < 1:
        raise ValueError("num_classes and width must be positive")
    rng = make_rng(seed)

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    c1, c2 = width, 2 * width
    flat = c2 * (h // 4) * (w // 4)
    layers = [
        Conv3x3(he((c1, 3, 3, 3), 27), np.zeros(c1)),
        ReLU(),
        MaxPool2(),
        Conv3x3(he((c2, c1, 3, 3), 9 * c1), np.zeros(c2)),
        ReLU(),
        MaxPool2(),
        Flatten(),
        Dense(he((num_classes, flat), flat), np.zeros(num_classes)),
    ]
    return Classifier(layers, (h, w), num_classes)


def build_mlp(input_shape=(3, 8, 8), num_classes=10, hidden=32, seed=0) -> Classifier:
    """flatten fc relu fc; a cheap model for property tests."""
    _, h, w = input_shape
    rng = make_rng(seed)
    d = 3 * h * w
    b1, b2 = np.sqrt(6.0 / d), np.sqrt(6.0 / hidden)
    layers = [
        Flatten(),
        Dense(rng.uniform(-b1, b1, (hidden, d)), np.zeros(hidden)),
        ReLU(),
        Dense(rng.uniform(-b2, b2, (num_classes, hidden)), np.zeros(num_classes)),
    ]
    return Classifier(layers, (h, w), num_classes)


# ---------------------------------------------------------------------------
# forward / loss / backward

def _check_batch(model: Classifier, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != (*model.input_hw, 3):
        raise ValueError(f"batch shape {batch.shape} does not match model input {(*model.input_hw, 3)}")
    return batch


def forward(model: Classifier, batch, dtype=np.float32) -> np.ndarray:
    """Logits for a normalized ``(n, H, W, 3)`` batch."""
    x = _check_batch(model, batch).astype(dtype, copy=False)
    for layer in model.layers:
        x, _ = layer.forward(x, dtype)
    return x


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels, smoothing: float = 0.0):
    """Mean softmax cross-entropy with optional label smoothing, and its logit gradient.

    The smoothed target is ``(1 - a) * onehot + a / C``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    logp = log_softmax(logits)
    target = np.full((n, c), smoothing / c, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / n
    grad = (np.exp(logp) - target) / n
    return float(loss), grad


def per_example_loss(logits, labels):
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return -logp[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]


def backward(model: Classifier, batch, labels, smoothing: float = 0.0, need_input_grad: bool = True, dtype=np.float32):
    """Loss, parameter gradients (aligned with ``model.parameters()``) and input gradient."""
    x = _check_batch(model, batch).astype(dtype, copy=False)
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x, dtype)
        caches.append(cache)
    loss, g = cross_entropy(x, labels, smoothing)
    grads = []
    for i in range(len(model.layers) - 1, -1, -1):
        g, pg = model.layers[i].backward(g, caches[i], need_input_grad or i > 0)
        grads = pg + grads
    return loss, grads, g


def predict_proba(model: Classifier, batch, rng=None, dtype=np.float32) -> np.ndarray:
    """Class confidences, with the model's output noise added when it has one."""
    probs = softmax(forward(model, batch, dtype).astype(np.float64))
    if model.output_noise_sigma2 > 0:
        rng = make_rng(rng if rng is not None else 0)
        probs = probs + rng.standard_normal(probs.shape) * np.sqrt(model.output_noise_sigma2)
    return probs


def average_loss(model: Classifier, images, labels, norm=None, rng=None, batch_size: int = 512) -> float:
    """Mean unsmoothed cross-entropy of ``images`` (pixels in [0, 1]).

    With output noise enabled, the loss is ``-log`` of the noisy confidence
    of the true class, floored at 1e-6.
    """
    from .data import CIFAR_NORM, normalize

    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("average_loss needs at least one example")
    return float(example_losses(model, images, labels, norm or CIFAR_NORM, rng, batch_size).mean())


def example_losses(model: Classifier, images, labels, norm=None, rng=None, batch_size: int = 512) -> np.ndarray:
    from .data import CIFAR_NORM, normalize

    norm = norm or CIFAR_NORM
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    noise_rng = make_rng(rng if rng is not None else 0) if model.output_noise_sigma2 > 0 else None
    for s in range(0, len(images), batch_size):
        x = normalize(images[s:s + batch_size], norm)
        y = labels[s:s + batch_size]
        if noise_rng is None:
            out.append(per_example_loss(forward(model, x), y))
        else:
            p = predict_proba(model, x, noise_rng)
            out.append(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-6)))
    return np.concatenate(out)


def accuracy(model: Classifier, images, labels, norm=None, batch_size: int = 512) -> float:
    from .data import CIFAR_NORM, normalize

    norm = norm or CIFAR_NORM
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for s in range(0, len(images), batch_size):
        logits = forward(model, normalize(images[s:s + batch_size], norm))
        hits += int((logits.argmax(axis=1) == labels[s:s + batch_size]).sum())
    return hits / len(labels)


def fgsm_perturb(model: Classifier, images, labels, epsilon: float, norm=None) -> np.ndarray:
    """``clip(x + eps * sign(dL/dx))`` for one image or a stack, pixels in [0, 1]."""
    from .data import CIFAR_NORM, normalize

    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if epsilon == 0:
        return images.copy()
    # d/dx of normalize is 1/std > 0, so the sign matches the normalized-input gradient
    _, _, gx = backward(model, normalize(batch, norm or CIFAR_NORM), labels)
    out = np.clip(batch + epsilon * np.sign(gx), 0.0, 1.0).astype(batch.dtype)
    return out[0] if single else out


def prune(model: Classifier, fraction: float) -> Classifier:
    """Global magnitude pruning: zero the ``floor(fraction * count)`` smallest weights (biases kept)."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    out = model.copy()
    weights = out.weight_tensors()
    flat = np.concatenate([np.abs(w).ravel() for w in weights])
    count = int(np.floor(fraction * flat.size))
    if count == 0:
        return out
    # stable sort: equal magnitudes prune in parameter order
    order = np.argsort(flat, kind="stable")[:count]
    mask = np.ones(flat.size, dtype=bool)
    mask[order] = False
    start = 0
    for w in weights:
        m = mask[start:start + w.size].reshape(w.shape)
        w *= m
        start += w.size
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Classifier, path) -> None:
    """Write the ANWM layout: header, then per layer kind/rank/dims/weights[/bias]."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<B", layer.kind))
        if layer.kind in (CONV, FC):
            for tensor in (layer.weight, layer.bias):
                parts.append(struct.pack("<I", tensor.ndim))
                parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
                parts.append(tensor.astype("<f4").tobytes())
        else:
            # parameter-free layers carry rank 0 and no data
            parts.append(struct.pack("<I", 0))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, fmt, field):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise FormatError("truncated checkpoint", field=field, offset=self.off)
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def tensor(self, field):
        (rank,) = self.take("<I", f"{field}.rank")
        dims = self.take(f"<{rank}I", f"{field}.dims") if rank else ()
        count = int(np.prod(dims)) if rank else 0
        if self.off + 4 * count > len(self.raw):
            raise FormatError("truncated checkpoint", field=f"{field}.data", offset=self.off)
        data = np.frombuffer(self.raw, dtype="<f4", count=count, offset=self.off).reshape(dims)
        self.off += 4 * count
        return data.astype(np.float32)


def load_checkpoint(path, num_classes: int | None = None, input_hw=None) -> Classifier:
    """Parse an ANWM checkpoint.

    ``input_hw`` defaults to the spatial size implied by the first fc layer
    of a two-pool CNN (square inputs).  ``num_classes``, when given, must
    agree with the final layer.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError("bad magic", field="magic", offset=0)
    r = _Reader(raw)
    r.off = 4
    (version,) = r.take("<I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", field="version", offset=4)
    (num_layers,) = r.take("<I", "num_layers")
    layers = []
    for i in range(num_layers):
        (kind,) = r.take("<B", f"layer{i}.kind")
        if kind in (CONV, FC):
            w = r.tensor(f"layer{i}.weight")
            b = r.tensor(f"layer{i}.bias")
            if kind == CONV and (w.ndim != 4 or w.shape[2:] != (3, 3) or b.shape != (w.shape[0],)):
                raise FormatError("bad conv shape", field=f"layer{i}.weight", offset=r.off)
            if kind == FC and (w.ndim != 2 or b.shape != (w.shape[0],)):
                raise FormatError("bad fc shape", field=f"layer{i}.weight", offset=r.off)
            layers.append((Conv3x3 if kind == CONV else Dense)(w, b))
        elif kind in (RELU, MAXPOOL, FLATTEN):
            (rank,) = r.take("<I", f"layer{i}.rank")
            if rank:
                raise FormatError("parameter-free layer with dims", field=f"layer{i}.rank", offset=r.off - 4)
            layers.append({RELU: ReLU, MAXPOOL: MaxPool2, FLATTEN: Flatten}[kind]())
        else:
            raise FormatError(f"unknown layer kind {kind}", field=f"layer{i}.kind", offset=r.off - 1)
    if r.off != len(raw):
        raise FormatError("trailing bytes", field="end", offset=r.off)
    if not layers or layers[-1].kind != FC:
        raise FormatError("last layer must be fully connected", field="layers", offset=r.off)
    classes = layers[-1].weight.shape[0]
    if num_classes is not None and classes != num_classes:
        raise FormatError(f"checkpoint has {classes} classes, expected {num_classes}", field="num_classes", offset=r.off)
    if input_hw is None:
        input_hw = _infer_input_hw(layers)
    try:
        return Classifier(layers, input_hw, classes)
    except ValueError as exc:
        raise FormatError(str(exc), field="shape", offset=r.off) from exc


def _infer_input_hw(layers):
    pools = sum(l.kind == MAXPOOL for l in layers)
    fc_idx = next(i for i, l in enumerate(layers) if l.kind == FC)
    fan_in = layers[fc_idx].weight.shape[1]
    convs = [l for l in layers[:fc_idx] if l.kind == CONV]
    channels = convs[-1].weight.shape[0] if convs else 3
    side2 = fan_in // channels
    side = int(round(np.sqrt(side2)))
    if side * side * channels != fan_in:
        raise FormatError("cannot infer input size; pass input_hw", field="shape")
    side <<= pools
    return (side, side)
