"""Sign-gradient attack family as configurations of one iterative driver.

The driver ascends the cross-entropy loss of a model (or a weighted logit
ensemble) under an L-infinity budget: optional per-iteration input
transforms, gradient of the per-example loss, optional L1-normalized
momentum accumulation, a signed step, and a projection back into the
epsilon ball intersected with [0, 1].

Named presets cover the whole family: fgsm, i_fgsm, mi_fgsm, pgd, dim,
rt_mi_fgsm, rt_dim.  Setting a transform probability to zero, a constant
brightness rate to one, or the decay to zero reproduces the corresponding
simpler attack bit for bit under a shared seed, because every random draw
comes from its own (seed, example, iteration, slot) substream.

By default transforms feed the gradient only: the update applies to the
untransformed iterate, which keeps iterates inside the epsilon ball of the
true input.  `overwrite_iterate=True` switches to literally replacing the
iterate with its transformed version before the gradient step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import nn
from . import rng as _rng
from .transforms import (
    BACKWARD_BY_KIND,
    BrightnessConfig,
    DiverseInputConfig,
    ErasingConfig,
    NoiseConfig,
    TransformRecord,
    clip_to_ball,
    diverse_input,
    gaussian_noise,
    random_brightness,
    random_erasing,
    replay_transform,
)

PRESET_NAMES = ("fgsm", "i_fgsm", "mi_fgsm", "pgd", "dim", "rt_mi_fgsm", "rt_dim")

AugmentConfig = Union[ErasingConfig, NoiseConfig]


@dataclass(frozen=True)
class AttackConfig:
    """Everything that determines an attack given the inputs.

    epsilon and step are on the normalized [0, 1] pixel scale; step defaults
    to epsilon/iterations.  decay > 0 turns on momentum accumulation.
    """

    epsilon: float
    iterations: int = 10
    step: Optional[float] = None
    decay: float = 0.0
    brightness: Optional[BrightnessConfig] = None
    diversity: Optional[DiverseInputConfig] = None
    augment: Optional[AugmentConfig] = None      # erasing/noise stand-ins for brightness
    random_start: bool = False
    seed: int = 0
    overwrite_iterate: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.decay < 0:
            raise ValueError(f"decay must be >= 0, got {self.decay}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        step = self.resolved_step
        if step < 0 or (step == 0 and self.epsilon > 0):
            raise ValueError(f"step must be positive, got {step}")
        if self.iterations > 1 and step * self.iterations < self.epsilon - 1e-12:
            raise ValueError(
                f"budget unreachable: step*iterations = {step * self.iterations} < "
                f"epsilon = {self.epsilon}"
            )

    @property
    def resolved_step(self) -> float:
        return self.epsilon / self.iterations if self.step is None else self.step

    def pipeline(self):
        """Transforms in application order (brightness, augment, diversity)."""
        stages = []
        if self.brightness is not None:
            stages.append(("brightness", self.brightness, _rng.SLOT_BRIGHTNESS))
        if self.augment is not None:
            kind = "erasing" if isinstance(self.augment, ErasingConfig) else "noise"
            stages.append((kind, self.augment, _rng.SLOT_AUGMENT))
        if self.diversity is not None:
            stages.append(("diversity", self.diversity, _rng.SLOT_DIVERSITY))
        return stages


def preset(name: str, epsilon: float, iterations: int = 10, seed: int = 0) -> AttackConfig:
    """Named attack with its customary defaults filled in."""
    if name == "fgsm":
        return AttackConfig(epsilon, iterations=1, step=epsilon, decay=0.0, seed=seed, name=name)
    if name == "i_fgsm":
        return AttackConfig(epsilon, iterations=iterations, decay=0.0, seed=seed, name=name)
    if name == "mi_fgsm":
        return AttackConfig(epsilon, iterations=iterations, decay=1.0, seed=seed, name=name)
    if name == "pgd":
        return AttackConfig(epsilon, iterations=iterations, decay=0.0, random_start=True,
                            seed=seed, name=name)
    if name == "dim":
        return AttackConfig(epsilon, iterations=iterations, decay=1.0,
                            diversity=DiverseInputConfig(probability=0.5), seed=seed, name=name)
    if name == "rt_mi_fgsm":
        return AttackConfig(epsilon, iterations=iterations, decay=1.0,
                            brightness=BrightnessConfig(probability=0.5), seed=seed, name=name)
    if name == "rt_dim":
        return AttackConfig(epsilon, iterations=iterations, decay=1.0,
                            brightness=BrightnessConfig(probability=1.0),
                            diversity=DiverseInputConfig(probability=0.5), seed=seed, name=name)
    raise ValueError(f"unknown attack preset {name!r}; known: {', '.join(PRESET_NAMES)}")


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSpec:
    """Models fused by a weighted sum of logits; weights default to 1/n."""

    models: tuple[nn.TrainedModel, ...]
    weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ValueError("ensemble needs at least one model")
        shape0 = models[0].architecture.input_shape
        classes0 = models[0].architecture.num_classes
        for m in models[1:]:
            if m.architecture.input_shape != shape0 or m.architecture.num_classes != classes0:
                raise ValueError(
                    f"ensemble mismatch: {m.name} has input {m.architecture.input_shape} / "
                    f"{m.architecture.num_classes} classes, expected {shape0} / {classes0}"
                )
        if self.weights is None:
            weights = tuple(1.0 / len(models) for _ in models)
        else:
            weights = tuple(float(w) for w in self.weights)
            if len(weights) != len(models):
                raise ValueError(f"{len(weights)} weights for {len(models)} models")
            if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ValueError(f"weights must be non-negative and sum to 1, got {weights}")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "weights", weights)

    @property
    def input_shape(self):
        return self.models[0].architecture.input_shape

    @property
    def num_classes(self):
        return self.models[0].architecture.num_classes


def _fused_losses_and_grads(spec: EnsembleSpec, batch, labels):
    """Per-example cross-entropy of the weighted logit sum, and its exact
    gradient with respect to the batch."""
    fused = None
    caches_all = []
    for w, m in zip(spec.weights, spec.models):
        logits, caches = nn._forward_with_caches(m.architecture, m.params, batch)
        caches_all.append(caches)
        fused = w * logits if fused is None else fused + w * logits
    logp = nn._log_softmax(fused)
    idx = np.arange(len(labels))
    losses = -logp[idx, labels]
    dlogits = np.exp(logp)
    dlogits[idx, labels] -= 1.0
    grad = np.zeros_like(batch)
    for w, m, caches in zip(spec.weights, spec.models, caches_all):
        dx, _ = nn._backward(m.architecture, m.params, caches, w * dlogits, want_dx=True)
        grad += dx
    return losses, grad


def fused_logits(spec: EnsembleSpec, batch) -> np.ndarray:
    out = None
    for w, m in zip(spec.weights, spec.models):
        logits = nn.forward(m, batch)
        out = w * logits if out is None else out + w * logits
    return out


def fuse_ensemble_gradient(spec: EnsembleSpec, x, y):
    """Loss and input gradient of the fused ensemble at one example."""
    x = np.asarray(x, dtype=np.float64)
    batch = x[None] if x.shape == spec.input_shape else x
    batch = nn._check_batch(spec.models[0].architecture, batch)
    labels = nn._check_labels([int(y)] if np.isscalar(y) else y, spec.num_classes)
    losses, grads = _fused_losses_and_grads(spec, batch, labels)
    if batch.shape[0] == 1:
        return float(losses[0]), grads[0]
    return losses, grads


# --------------------------------------------------------------------------
# the driver
# --------------------------------------------------------------------------

_APPLY_BY_KIND = {
    "brightness": random_brightness,
    "erasing": random_erasing,
    "noise": gaussian_noise,
    "diversity": diverse_input,
}


@dataclass(frozen=True)
class TraceRow:
    example: int
    iteration: int
    loss: float
    grad_l1: float
    records: tuple[TransformRecord, ...]


@dataclass(frozen=True)
class AttackResult:
    """Adversarial batch plus per-example bookkeeping and the iteration trace."""

    adversarial: np.ndarray
    misclassified: np.ndarray      # fused/source-model prediction differs from label
    ok: np.ndarray                 # False where non-finite values aborted the example
    iterations_run: np.ndarray
    config: AttackConfig
    trace: tuple[TraceRow, ...]
    momentum_history: Optional[tuple[np.ndarray, ...]] = None

    @property
    def failed_count(self) -> int:
        return int((~self.ok).sum())

    @property
    def seed(self) -> int:
        return self.config.seed


def run_attack(target, x, y, cfg: AttackConfig, capture_momentum: bool = False,
               _replay: Optional[dict] = None) -> AttackResult:
    """Craft adversarial examples for a batch against a model or ensemble.

    Per example: start at x (or a uniform point of the epsilon ball for
    random_start); each iteration transforms the iterate for the gradient
    only, routes the gradient back through the transforms, optionally folds
    it into an L1-normalized momentum term, then takes a signed step and
    projects into the epsilon ball around the original input.
    """
    spec = target if isinstance(target, EnsembleSpec) else EnsembleSpec((target,))
    arch = spec.models[0].architecture
    x = np.asarray(x, dtype=np.float64)
    if x.shape == arch.input_shape:
        x = x[None]
    x = nn._check_batch(arch, x)
    labels = nn._check_labels([int(y)] if np.isscalar(y) else y, arch.num_classes)
    if len(x) == 0:
        raise ValueError("run_attack needs a non-empty batch")
    if len(labels) != len(x):
        raise ValueError(f"{len(x)} examples vs {len(labels)} labels")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("attack inputs must lie in [0, 1]")

    n = len(x)
    eps = cfg.epsilon
    step = cfg.resolved_step
    origin = x.copy()
    x_cur = origin.copy()
    if cfg.random_start:
        for i in range(n):
            gen = _rng.generator(cfg.seed, _rng.DOMAIN_ATTACK, i, 0, _rng.SLOT_INIT)
            x_cur[i] += gen.uniform(-eps, eps, size=arch.input_shape)
        x_cur = clip_to_ball(x_cur, origin, eps)

    pipeline = cfg.pipeline()
    g = np.zeros_like(x_cur)
    ok = np.ones(n, dtype=bool)
    iters_run = np.zeros(n, dtype=np.int64)
    trace: list[TraceRow] = []
    history = [] if capture_momentum else None

    for t in range(cfg.iterations):
        if pipeline:
            x_in = x_cur.copy()
            recs = []
            for i in range(n):
                ex_recs = []
                for kind, tcfg, slot in pipeline:
                    if _replay is not None:
                        rec = _replay[(i, t, kind)]
                        x_in[i] = replay_transform(x_in[i], rec)
                    else:
                        seed_i = _rng.substream_seed(cfg.seed, _rng.DOMAIN_ATTACK, i, t, slot)
                        x_in[i], rec = _APPLY_BY_KIND[kind](x_in[i], tcfg, seed_i)
                    ex_recs.append(rec)
                recs.append(tuple(ex_recs))
        else:
            x_in = x_cur
            recs = [()] * n

        losses, grads = _fused_losses_and_grads(spec, x_in, labels)
        finite = np.isfinite(losses) & np.isfinite(grads.reshape(n, -1)).all(axis=1)
        ok &= finite

        if cfg.overwrite_iterate:
            if x_in is not x_cur:
                x_cur = x_in
        else:
            for i in range(n):
                for rec in reversed(recs[i]):
                    if rec.applied:
                        grads[i] = BACKWARD_BY_KIND[rec.kind](grads[i], rec)

        grads[~ok] = 0.0
        l1 = np.abs(grads).reshape(n, -1).sum(axis=1)
        if cfg.decay > 0:
            denom = np.where(l1 > 0, l1, 1.0)  # zero gradient stays the zero tensor
            g = cfg.decay * g + grads / denom[:, None, None, None]
        else:
            g = grads
        g[~ok] = 0.0
        x_cur = clip_to_ball(x_cur + step * np.sign(g), origin, eps)
        iters_run[ok] = t + 1
        for i in range(n):
            trace.append(TraceRow(i, t, float(losses[i]), float(l1[i]), recs[i]))
        if capture_momentum:
            history.append(g.copy())

    predictions = np.argmax(fused_logits(spec, x_cur), axis=1)
    return AttackResult(
        adversarial=x_cur,
        misclassified=predictions != labels,
        ok=ok,
        iterations_run=iters_run,
        config=cfg,
        trace=tuple(trace),
        momentum_history=tuple(history) if capture_momentum else None,
    )


def replay_attack(target, x, y, result: AttackResult) -> AttackResult:
    """Re-run an attack feeding the recorded transform draws back in."""
    records = {}
    for row in result.trace:
        for rec in row.records:
            records[(row.example, row.iteration, rec.kind)] = rec
    return run_attack(target, x, y, result.config, _replay=records)


# --------------------------------------------------------------------------
# trace serialization
# --------------------------------------------------------------------------

_TRACE_HEADER = ("example_index", "iteration", "loss", "l1_grad_norm",
                 "brightness_applied", "r", "diversity_applied", "t", "offsets")


def attack_trace(result: AttackResult) -> str:
    """Tab-separated per-(example, iteration) log, byte-stable under a fixed seed."""
    lines = ["# " + "\t".join(_TRACE_HEADER)]
    for row in sorted(result.trace, key=lambda r: (r.example, r.iteration)):
        bright = next((r for r in row.records if r.kind == "brightness"), None)
        div = next((r for r in row.records if r.kind == "diversity"), None)
        fields = [
            str(row.example),
            str(row.iteration),
            repr(row.loss),
            repr(row.grad_l1),
            "1" if (bright is not None and bright.applied) else "0",
            repr(bright.rate) if (bright is not None and bright.applied) else "",
            "1" if (div is not None and div.applied) else "0",
            str(div.size) if (div is not None and div.applied) else "",
            f"{div.offset[0]},{div.offset[1]}" if (div is not None and div.applied) else "",
        ]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def write_trace(result: AttackResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(attack_trace(result), encoding="utf-8", newline="\n")
    return path
