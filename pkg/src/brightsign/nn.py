"""Minimal deterministic feed-forward network engine.

Everything is float64 and purely functional: a forward pass, softmax
cross-entropy loss, exact reverse-mode gradients with respect to inputs
(for attacks) and parameters (for training), and an SGD-with-momentum
training loop that can mix sign-gradient adversarial examples into each
batch.  A trained model is immutable, so inference and gradient calls are
reentrant and models can be shared freely across threads.

Layer vocabulary: dense, conv2d (stride 1, no padding), relu, maxpool2x2,
flatten.  Batches are NCHW float64 arrays; images live in [0, 1].
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

log = logging.getLogger(__name__)

Array = np.ndarray


# --------------------------------------------------------------------------
# layer descriptors and architectures
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    out_units: int


@dataclass(frozen=True)
class Conv2d:
    kernel_h: int
    kernel_w: int
    out_channels: int  # stride 1, no padding


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2d, Relu, MaxPool2x2, Flatten]


@dataclass(frozen=True)
class Architecture:
    """Layer stack plus input geometry; validates the full shape chain."""

    input_shape: tuple[int, int, int]  # (channels, height, width)
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(d <= 0 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive dims (C,H,W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        shapes = self.output_shapes()
        final = shapes[-1]
        if final != (self.num_classes,):
            raise ValueError(
                f"architecture output shape {final} does not match num_classes {self.num_classes}"
            )

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Shape after each layer, starting from input_shape; raises on a broken chain."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ValueError(f"layer {idx} (conv2d) needs a CxHxW input, got {shape}")
                c, h, w = shape
                if layer.kernel_h > h or layer.kernel_w > w:
                    raise ValueError(
                        f"layer {idx} (conv2d) kernel {layer.kernel_h}x{layer.kernel_w} "
                        f"exceeds input {h}x{w}"
                    )
                shape = (layer.out_channels, h - layer.kernel_h + 1, w - layer.kernel_w + 1)
            elif isinstance(layer, MaxPool2x2):
                if len(shape) != 3:
                    raise ValueError(f"layer {idx} (maxpool2x2) needs a CxHxW input, got {shape}")
                c, h, w = shape
                if h < 2 or w < 2:
                    raise ValueError(f"layer {idx} (maxpool2x2) input {h}x{w} too small")
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, Flatten):
                if len(shape) != 3:
                    raise ValueError(f"layer {idx} (flatten) needs a CxHxW input, got {shape}")
                shape = (shape[0] * shape[1] * shape[2],)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ValueError(f"layer {idx} (dense) needs a flat input, got {shape}")
                shape = (layer.out_units,)
            elif isinstance(layer, Relu):
                pass
            else:
                raise ValueError(f"layer {idx}: unknown layer {layer!r}")
            out.append(shape)
        return out


def init_params(arch: Architecture, rng: np.random.Generator):
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, drawn in layer order."""
    params: list[Optional[tuple[Array, Array]]] = []
    shape: tuple[int, ...] = arch.input_shape
    for layer, out_shape in zip(arch.layers, arch.output_shapes()):
        if isinstance(layer, Dense):
            fan_in = shape[0]
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.out_units, fan_in))
            b = np.zeros(layer.out_units)
            params.append((w, b))
        elif isinstance(layer, Conv2d):
            fan_in = shape[0] * layer.kernel_h * layer.kernel_w
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.out_channels, shape[0], layer.kernel_h, layer.kernel_w))
            b = np.zeros(layer.out_channels)
            params.append((w, b))
        else:
            params.append(None)
        shape = out_shape
    return params


# --------------------------------------------------------------------------
# trained models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainedModel:
    """Architecture plus learned parameters; immutable after construction."""

    architecture: Architecture
    params: tuple[Optional[tuple[Array, Array]], ...]
    name: str = "model"
    training_kind: str = "normal"  # {"normal", "adversarial"}
    train_accuracy: float = float("nan")

    def __post_init__(self):
        if self.training_kind not in ("normal", "adversarial"):
            raise ValueError(f"training_kind must be normal|adversarial, got {self.training_kind!r}")
        frozen = []
        for entry in self.params:
            if entry is None:
                frozen.append(None)
                continue
            w, b = (np.array(a, dtype=np.float64) for a in entry)  # copy, then freeze
            w.setflags(write=False)
            b.setflags(write=False)
            frozen.append((w, b))
        object.__setattr__(self, "params", tuple(frozen))


def _check_batch(arch: Architecture, batch: Array) -> Array:
    batch = np.asarray(batch, dtype=np.float64)
    expected = arch.input_shape
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(
            f"batch shape {batch.shape} does not match expected (N, {expected[0]}, "
            f"{expected[1]}, {expected[2]})"
        )
    return batch


def _check_labels(labels, num_classes: int) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a flat integer list, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {num_classes})")
    return labels


# --------------------------------------------------------------------------
# layer forward/backward kernels
# --------------------------------------------------------------------------

def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.reshape(o, -1).T + b
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return out, (cols, x.shape)


def _conv_backward(dout, cache, w, want_dx, want_dp):
    cols, x_shape = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    dw = db = dx = None
    if want_dp:
        dw = (d2.T @ cols).reshape(w.shape)
        db = d2.sum(axis=0)
    if want_dx:
        dwin = (d2 @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros(x_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + oh, j:j + ow] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    v = x[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = v.argmax(axis=4)  # first maximum wins on ties
    out = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, cache):
    idx, x_shape = cache
    n, c, h, w = x_shape
    oh, ow = h // 2, w // 2
    dwins = np.zeros((n, c, oh, ow, 4))
    np.put_along_axis(dwins, idx[..., None], dout[..., None], axis=4)
    dx = np.zeros(x_shape)
    block = dwins.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx[:, :, :oh * 2, :ow * 2] = block.reshape(n, c, oh * 2, ow * 2)
    return dx


def _forward_with_caches(arch: Architecture, params, batch: Array):
    """Run the stack, returning logits and per-layer caches for backprop."""
    x = batch
    caches = []
    for layer, p in zip(arch.layers, params):
        if isinstance(layer, Dense):
            w, b = p
            caches.append(("dense", x))
            x = x @ w.T + b
        elif isinstance(layer, Conv2d):
            w, b = p
            x, cache = _conv_forward(x, w, b)
            caches.append(("conv", cache))
        elif isinstance(layer, Relu):
            caches.append(("relu", x > 0))
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool2x2):
            x, cache = _pool_forward(x)
            caches.append(("pool", cache))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
    return x, caches


def _backward(arch: Architecture, params, caches, dlogits, want_dx=True, want_dparams=False):
    """Propagate dlogits back through the stack.

    Returns (dx, param_grads); either may be None depending on the flags.
    """
    grad = dlogits
    param_grads: list[Optional[tuple[Array, Array]]] = [None] * len(arch.layers)
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        kind, cache = caches[i]
        need_dx = want_dx or i > 0
        if isinstance(layer, Dense):
            w, b = params[i]
            if want_dparams:
                param_grads[i] = (grad.T @ cache, grad.sum(axis=0))
            grad = grad @ w if need_dx else None
        elif isinstance(layer, Conv2d):
            w, b = params[i]
            dx, dw, db = _conv_backward(grad, cache, w, need_dx, want_dparams)
            if want_dparams:
                param_grads[i] = (dw, db)
            grad = dx
        elif isinstance(layer, Relu):
            grad = grad * cache
        elif isinstance(layer, MaxPool2x2):
            grad = _pool_backward(grad, cache)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(cache)
    return (grad if want_dx else None), (param_grads if want_dparams else None)


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def forward(model: TrainedModel, batch: Array) -> Array:
    """Raw pre-softmax logits (N, num_classes); pure function of (params, batch)."""
    batch = _check_batch(model.architecture, batch)
    logits, _ = _forward_with_caches(model.architecture, model.params, batch)
    return logits


def _log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Array) -> Array:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss(logits: Array, labels) -> float:
    """Mean softmax cross-entropy (natural log, max-subtracted for stability)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, K), got shape {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def per_example_losses_and_input_gradients(model: TrainedModel, batch: Array, labels):
    """Per-example cross-entropy values and exact input gradients.

    Gradients are of each example's own loss (no batch averaging), so the
    result for example i is independent of what else sits in the batch.
    """
    batch = _check_batch(model.architecture, batch)
    labels = _check_labels(labels, model.architecture.num_classes)
    return _input_grads_raw(model.architecture, model.params, batch, labels)


def _input_grads_raw(arch, params, batch, labels):
    logits, caches = _forward_with_caches(arch, params, batch)
    logp = _log_softmax(logits)
    losses = -logp[np.arange(len(labels)), labels]
    dlogits = np.exp(logp)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dx, _ = _backward(arch, params, caches, dlogits, want_dx=True)
    return losses, dx


def input_gradient(model: TrainedModel, x: Array, y: int) -> Array:
    """Exact reverse-mode gradient of the loss at (x, y) w.r.t. the input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.architecture.input_shape:
        raise ValueError(
            f"input shape {x.shape} does not match expected {model.architecture.input_shape}"
        )
    _, grads = per_example_losses_and_input_gradients(model, x[None], [int(y)])
    return grads[0]


def param_gradients(model: TrainedModel, batch: Array, labels):
    """Gradients of the mean batch loss w.r.t. every parameter tensor."""
    batch = _check_batch(model.architecture, batch)
    labels = _check_labels(labels, model.architecture.num_classes)
    mean_loss, grads = _param_grads_raw(model.architecture, model.params, batch, labels)
    return grads


def _param_grads_raw(arch, params, batch, labels):
    logits, caches = _forward_with_caches(arch, params, batch)
    logp = _log_softmax(logits)
    n = len(labels)
    mean_loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    _, grads = _backward(arch, params, caches, dlogits, want_dx=False, want_dparams=True)
    return mean_loss, grads


def predict(model: TrainedModel, x: Array) -> int:
    """Argmax label for a single input; ties resolve to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.architecture.input_shape:
        x = x[None]
    logits = forward(model, x)
    return int(np.argmax(logits[0]))


def predict_batch(model: TrainedModel, batch: Array, chunk: int = 1024) -> Array:
    """Argmax labels for a batch, evaluated in fixed-size chunks."""
    batch = _check_batch(model.architecture, batch)
    out = np.empty(len(batch), dtype=np.int64)
    for start in range(0, len(batch), chunk):
        logits = forward(model, batch[start:start + chunk])
        out[start:start + chunk] = np.argmax(logits, axis=1)
    return out


def accuracy(model: TrainedModel, batch: Array, labels) -> float:
    labels = _check_labels(labels, model.architecture.num_classes)
    return float((predict_batch(model, batch) == labels).mean())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    seed: int = 0
    adversarial_mix: float = 0.0       # fraction of each batch replaced by FGSM examples
    adversarial_epsilon: float = 16 / 255

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.sgd_momentum < 1:
            raise ValueError(f"sgd_momentum must be in [0,1), got {self.sgd_momentum}")
        if not 0 <= self.adversarial_mix <= 1:
            raise ValueError(f"adversarial_mix must be in [0,1], got {self.adversarial_mix}")
        if not 0 < self.adversarial_epsilon <= 1:
            raise ValueError(f"adversarial_epsilon must be in (0,1], got {self.adversarial_epsilon}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


def train(arch: Architecture, dataset, cfg: TrainConfig, name: str = "model") -> TrainedModel:
    """Plain SGD-with-momentum training; bit-identical params for identical inputs."""
    if cfg.adversarial_mix != 0:
        raise ValueError("train requires adversarial_mix == 0; use adversarial_train")
    return _run_training(arch, dataset, cfg, name)


def adversarial_train(arch: Architecture, dataset, cfg: TrainConfig, name: str = "model") -> TrainedModel:
    """Training where each batch's leading slice is replaced by single-step
    sign-gradient examples crafted against the current parameters."""
    return _run_training(arch, dataset, cfg, name)


def _run_training(arch: Architecture, dataset, cfg: TrainConfig, name: str) -> TrainedModel:
    images = _check_batch(arch, np.asarray(dataset.images, dtype=np.float64))
    labels = _check_labels(dataset.labels, arch.num_classes)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")

    init_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    params = init_params(arch, init_rng)
    velocity = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1])) for p in params]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    n_adv = int(cfg.adversarial_mix * cfg.batch_size)

    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx]
            yb = labels[idx]
            if n_adv > 0:
                k = min(n_adv, len(idx))
                _, gin = _input_grads_raw(arch, params, xb[:k], yb[:k])
                xb[:k] = np.clip(xb[:k] + cfg.adversarial_epsilon * np.sign(gin), 0.0, 1.0)
            batch_loss, grads = _param_grads_raw(arch, params, xb, yb)
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite loss {batch_loss} at epoch {epoch}, step {step} — aborting training"
                )
            for i, g in enumerate(grads):
                if g is None:
                    continue
                vw, vb = velocity[i]
                w, b = params[i]
                vw *= cfg.sgd_momentum
                vw += g[0]
                vb *= cfg.sgd_momentum
                vb += g[1]
                w -= cfg.learning_rate * vw
                b -= cfg.learning_rate * vb
            step += 1

    kind = "adversarial" if n_adv > 0 else "normal"
    model = TrainedModel(arch, _as_param_tuple(params), name=name, training_kind=kind)
    acc = accuracy(model, images, labels)
    model = TrainedModel(arch, model.params, name=name, training_kind=kind, train_accuracy=acc)
    log.info("trained %s (%s): final train accuracy %.4f", name, kind, acc)
    return model


def _as_param_tuple(params):
    return tuple(None if p is None else (p[0].copy(), p[1].copy()) for p in params)
