"""Stochastic input transforms used inside the attack loop.

Each transform takes one (C,H,W) image plus a config and an RNG handle (a
numpy Generator, or an integer substream seed for replayable records) and
returns the transformed image together with a TransformRecord holding every
drawn value.  A matching *_gradient_backward routine pushes an upstream
gradient through the transform, so attack updates can be taken with respect
to the untransformed iterate.

Also here: the epsilon-ball / pixel-range projection applied after every
attack step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BrightnessConfig:
    """Scale the whole image by a factor r <= 1 with probability p.

    random_range mode draws r uniformly from the half-open interval
    (lower, 1] via r = 1 - U*(1 - lower) with U uniform in [0, 1);
    constant mode always uses `rate` (rate = 1 is the identity).
    """

    probability: float
    mode: str = "random_range"       # "random_range" | "constant"
    lower: float = 1 / 16
    rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {self.probability}")
        if self.mode not in ("random_range", "constant"):
            raise ValueError(f"mode must be random_range|constant, got {self.mode!r}")
        if not 0.0 < self.lower <= 1.0:
            raise ValueError(f"lower must be in (0,1], got {self.lower}")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"rate must be in (0,1], got {self.rate}")


@dataclass(frozen=True)
class DiverseInputConfig:
    """Nearest-neighbour shrink to a random side t, zero-padded back in place."""

    probability: float
    min_scale: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {self.probability}")
        if not 0.0 < self.min_scale <= 1.0:
            raise ValueError(f"min_scale must be in (0,1], got {self.min_scale}")


@dataclass(frozen=True)
class ErasingConfig:
    """Zero an axis-aligned rectangle covering min_area..max_area of the image."""

    probability: float
    min_area: float = 0.10
    max_area: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {self.probability}")
        if not 0.0 < self.min_area <= self.max_area < 1.0:
            raise ValueError(f"need 0 < min_area <= max_area < 1, got "
                             f"({self.min_area}, {self.max_area})")


@dataclass(frozen=True)
class NoiseConfig:
    """Add zero-mean Gaussian noise and clamp back to [0, 1]."""

    probability: float
    sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {self.probability}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class TransformRecord:
    """Everything needed to replay one transform draw and its gradient routing."""

    kind: str                                    # brightness | diversity | erasing | noise
    applied: bool
    rate: Optional[float] = None                 # brightness factor actually used
    size: Optional[int] = None                   # resized side t (diversity)
    offset: Optional[tuple[int, int]] = None     # (top, left) placement (diversity)
    rect: Optional[tuple[int, int, int, int]] = None  # (top, left, h, w) (erasing)
    seed: Optional[int] = None                   # substream seed, when one was given


def _as_generator(rng):
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng)), int(rng)
    return rng, None


# --------------------------------------------------------------------------
# brightness
# --------------------------------------------------------------------------

def random_brightness(x: np.ndarray, cfg: BrightnessConfig, rng):
    """With probability p return r*x (one scalar r per call), else x unchanged."""
    gen, seed = _as_generator(rng)
    applied = gen.random() < cfg.probability
    if not applied:
        return x, TransformRecord("brightness", False, seed=seed)
    if cfg.mode == "constant":
        r = cfg.rate
    else:
        r = 1.0 - gen.random() * (1.0 - cfg.lower)  # r in (lower, 1]
    return x * r, TransformRecord("brightness", True, rate=r, seed=seed)


def brightness_gradient_backward(upstream_grad: np.ndarray, record: TransformRecord) -> np.ndarray:
    if record.kind != "brightness":
        raise ValueError(f"record kind {record.kind!r} is not brightness")
    if not record.applied:
        return upstream_grad
    return record.rate * upstream_grad


# --------------------------------------------------------------------------
# diverse input (resize and pad)
# --------------------------------------------------------------------------

def _resize_map(side: int, target: int) -> np.ndarray:
    # floor sampling; strictly increasing for target <= side, identity at target == side
    return (np.arange(target) * side) // target


def diverse_input(x: np.ndarray, cfg: DiverseInputConfig, rng):
    """With probability p: shrink to t in [ceil(min_scale*S), S] by nearest
    neighbour, then zero-pad back to S x S at a uniformly drawn offset."""
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"diverse_input needs (C,S,S) input, got {x.shape}")
    side = x.shape[1]
    gen, seed = _as_generator(rng)
    applied = gen.random() < cfg.probability
    if not applied:
        return x, TransformRecord("diversity", False, seed=seed)
    lo = int(np.ceil(cfg.min_scale * side))
    t = int(gen.integers(lo, side + 1))
    top = int(gen.integers(0, side - t + 1))
    left = int(gen.integers(0, side - t + 1))
    out = _apply_diversity(x, side, t, top, left)
    return out, TransformRecord("diversity", True, size=t, offset=(top, left), seed=seed)


def _apply_diversity(x, side, t, top, left):
    src = _resize_map(side, t)
    out = np.zeros_like(x)
    out[:, top:top + t, left:left + t] = x[:, src[:, None], src[None, :]]
    return out


def diverse_input_gradient_backward(upstream_grad: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Adjoint of the sample-and-pad operator: padded cells drop, sampled cells
    route back to their source pixel (accumulating on collision)."""
    if record.kind != "diversity":
        raise ValueError(f"record kind {record.kind!r} is not diversity")
    if not record.applied:
        return upstream_grad
    side = upstream_grad.shape[1]
    t = record.size
    top, left = record.offset
    src = _resize_map(side, t)
    inner = upstream_grad[:, top:top + t, left:left + t]
    out = np.zeros_like(upstream_grad)
    c = upstream_grad.shape[0]
    np.add.at(out, (np.arange(c)[:, None, None], src[None, :, None], src[None, None, :]), inner)
    return out


# --------------------------------------------------------------------------
# ablation transforms
# --------------------------------------------------------------------------

_erase_pairs_cache: dict[tuple, list[tuple[int, int]]] = {}


def _erase_pairs(h, w, lo, hi):
    key = (h, w, lo, hi)
    if key not in _erase_pairs_cache:
        area = h * w
        pairs = [(eh, ew) for eh in range(1, h + 1) for ew in range(1, w + 1)
                 if lo <= eh * ew / area <= hi]
        if not pairs:
            raise ValueError(f"no rectangle of a {h}x{w} image covers [{lo}, {hi}] of its area")
        _erase_pairs_cache[key] = pairs
    return _erase_pairs_cache[key]


def random_erasing(x: np.ndarray, cfg: ErasingConfig, rng):
    """With probability p zero out a random rectangle; area is exactly within bounds."""
    gen, seed = _as_generator(rng)
    applied = gen.random() < cfg.probability
    if not applied:
        return x, TransformRecord("erasing", False, seed=seed)
    h, w = x.shape[1], x.shape[2]
    pairs = _erase_pairs(h, w, cfg.min_area, cfg.max_area)
    eh, ew = pairs[int(gen.integers(len(pairs)))]
    top = int(gen.integers(0, h - eh + 1))
    left = int(gen.integers(0, w - ew + 1))
    out = x.copy()
    out[:, top:top + eh, left:left + ew] = 0.0
    return out, TransformRecord("erasing", True, rect=(top, left, eh, ew), seed=seed)


def erasing_gradient_backward(upstream_grad: np.ndarray, record: TransformRecord) -> np.ndarray:
    if record.kind != "erasing":
        raise ValueError(f"record kind {record.kind!r} is not erasing")
    if not record.applied:
        return upstream_grad
    top, left, eh, ew = record.rect
    out = upstream_grad.copy()
    out[:, top:top + eh, left:left + ew] = 0.0
    return out


def gaussian_noise(x: np.ndarray, cfg: NoiseConfig, rng):
    """With probability p add N(0, sigma^2) noise, clamped back to [0, 1]."""
    gen, seed = _as_generator(rng)
    applied = gen.random() < cfg.probability
    if not applied:
        return x, TransformRecord("noise", False, seed=seed)
    out = np.clip(x + gen.normal(0.0, cfg.sigma, size=x.shape), 0.0, 1.0)
    return out, TransformRecord("noise", True, rate=cfg.sigma, seed=seed)


def noise_gradient_backward(upstream_grad: np.ndarray, record: TransformRecord) -> np.ndarray:
    if record.kind != "noise":
        raise ValueError(f"record kind {record.kind!r} is not noise")
    return upstream_grad


def replay_transform(x: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Reapply a recorded transform without fresh randomness."""
    if not record.applied:
        return x
    if record.kind == "brightness":
        return x * record.rate
    if record.kind == "diversity":
        return _apply_diversity(x, x.shape[1], record.size, *record.offset)
    if record.kind == "erasing":
        top, left, eh, ew = record.rect
        out = x.copy()
        out[:, top:top + eh, left:left + ew] = 0.0
        return out
    if record.kind == "noise":
        if record.seed is None:
            raise ValueError("noise record without a substream seed cannot be replayed")
        gen = np.random.default_rng(record.seed)
        gen.random()  # the Bernoulli draw precedes the noise draw
        return np.clip(x + gen.normal(0.0, record.rate, size=x.shape), 0.0, 1.0)
    raise ValueError(f"unknown record kind {record.kind!r}")


BACKWARD_BY_KIND = {
    "brightness": brightness_gradient_backward,
    "diversity": diverse_input_gradient_backward,
    "erasing": erasing_gradient_backward,
    "noise": noise_gradient_backward,
}


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def clip_to_ball(candidate: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Elementwise clamp of `candidate` into the L-inf epsilon ball around
    `origin`, intersected with the [0, 1] pixel range."""
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ValueError(f"shape mismatch: candidate {candidate.shape} vs origin {origin.shape}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    lo = np.maximum(0.0, origin - epsilon)
    hi = np.minimum(1.0, origin + epsilon)
    return np.clip(candidate, lo, hi)
