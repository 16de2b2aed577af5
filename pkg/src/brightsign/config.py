"""Flat key=value run configuration.

One `key = value` pair per line, UTF-8, `#` comments.  Unknown keys are
rejected and numeric keys are range-checked at parse time.  Perturbation
sizes (`epsilon`, `adversarial_epsilon`, `step_alpha`) are written on the
0-255 byte scale and divided by 255 internally.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace as dc_replace
from pathlib import Path
from typing import Optional

from .attacks import PRESET_NAMES, AttackConfig, preset
from .transforms import BrightnessConfig, DiverseInputConfig


class ConfigError(Exception):
    """Bad configuration file or value; maps to exit code 2 in the CLI."""


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    train_idx_images: Optional[str] = None
    train_idx_labels: Optional[str] = None
    eval_idx_images: Optional[str] = None
    eval_idx_labels: Optional[str] = None
    class_count: int = 10
    image_size: int = 16
    channels: int = 1
    train_examples: int = 6000
    eval_examples: int = 1000
    eval_limit: int = 1000
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    adversarial_mix: float = 0.5
    adversarial_epsilon: float = 16.0    # byte scale
    epsilon: float = 16.0                # byte scale
    iterations: int = 10
    step_alpha: Optional[float] = None   # byte scale; empty means epsilon/iterations
    decay: float = 1.0
    brightness_p: Optional[float] = None     # empty means the preset default
    brightness_lower: float = 1 / 16
    brightness_mode: str = "random"          # random | constant
    brightness_r: float = 1.0
    diversity_p: Optional[float] = None      # empty means the preset default
    diversity_min_scale: float = 0.75
    attacks: tuple[str, ...] = ("i_fgsm", "mi_fgsm", "dim", "rt_mi_fgsm", "rt_dim")
    seed: int = 7
    workers: int = 1
    model_dir: Optional[str] = None      # empty means <out>/models


def _int_in(lo, hi=None):
    def parse(key, raw):
        try:
            v = int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
        if v < lo or (hi is not None and v > hi):
            raise ConfigError(f"{key}: {v} outside [{lo}, {hi if hi is not None else 'inf'}]")
        return v
    return parse


def _float_in(lo, hi, lo_open=False, hi_open=False):
    def parse(key, raw):
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
        lo_ok = v > lo if lo_open else v >= lo
        hi_ok = v < hi if hi_open else v <= hi
        if not (lo_ok and hi_ok):
            raise ConfigError(f"{key}: {v} outside "
                              f"{'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}")
        return v
    return parse


def _choice(*options):
    def parse(key, raw):
        if raw not in options:
            raise ConfigError(f"{key}: {raw!r} not one of {options}")
        return raw
    return parse


def _path(key, raw):
    return raw


def _attack_list(key, raw):
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not names:
        raise ConfigError(f"{key}: empty attack list")
    for name in names:
        if name not in PRESET_NAMES:
            raise ConfigError(f"{key}: unknown attack {name!r}; known: {', '.join(PRESET_NAMES)}")
    return names


# key -> (parser, allows_empty)
_KEYS = {
    "dataset": (_choice("synthetic", "idx"), False),
    "train_idx_images": (_path, True),
    "train_idx_labels": (_path, True),
    "eval_idx_images": (_path, True),
    "eval_idx_labels": (_path, True),
    "class_count": (_int_in(2, 26), False),
    "image_size": (_int_in(12), False),
    "channels": (_int_in(1), False),
    "train_examples": (_int_in(1), False),
    "eval_examples": (_int_in(1), False),
    "eval_limit": (_int_in(1), False),
    "epochs": (_int_in(0), False),
    "batch_size": (_int_in(1), False),
    "learning_rate": (_float_in(0.0, 10.0, lo_open=True), False),
    "sgd_momentum": (_float_in(0.0, 1.0, hi_open=True), False),
    "adversarial_mix": (_float_in(0.0, 1.0), False),
    "adversarial_epsilon": (_float_in(0.0, 255.0, lo_open=True), False),
    "epsilon": (_float_in(0.0, 255.0), False),
    "iterations": (_int_in(1), False),
    "step_alpha": (_float_in(0.0, 255.0, lo_open=True), True),
    "decay": (_float_in(0.0, 10.0), False),
    "brightness_p": (_float_in(0.0, 1.0), True),
    "brightness_lower": (_float_in(0.0, 1.0, lo_open=True), False),
    "brightness_mode": (_choice("random", "constant"), False),
    "brightness_r": (_float_in(0.0, 1.0, lo_open=True), False),
    "diversity_p": (_float_in(0.0, 1.0), True),
    "diversity_min_scale": (_float_in(0.0, 1.0, lo_open=True), False),
    "attacks": (_attack_list, False),
    "seed": (_int_in(0), False),
    "workers": (_int_in(1), False),
    "model_dir": (_path, True),
}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw_line.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, allows_empty = _KEYS[key]
        if value == "":
            if not allows_empty:
                raise ConfigError(f"line {lineno}: {key} needs a value")
            setattr(cfg, key, None)
        else:
            setattr(cfg, key, parser(key, value))
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig):
    if cfg.dataset == "idx":
        missing = [k for k in ("train_idx_images", "train_idx_labels",
                               "eval_idx_images", "eval_idx_labels")
                   if getattr(cfg, k) is None]
        if missing:
            raise ConfigError(f"dataset=idx needs {', '.join(missing)}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def render_config(cfg: RunConfig) -> str:
    """Canonical `key = value` text with every default filled in."""
    lines = []
    for key in sorted(_KEYS):
        value = getattr(cfg, key)
        if key == "attacks":
            value = ",".join(value)
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def attack_config_from(cfg: RunConfig, name: str, seed: int) -> AttackConfig:
    """Materialize an attack preset with the run configuration's overrides."""
    base = preset(name, cfg.epsilon / 255.0, cfg.iterations, seed=seed)
    changes = {}
    if cfg.step_alpha is not None:
        changes["step"] = cfg.step_alpha / 255.0
    if base.decay > 0:
        changes["decay"] = cfg.decay
    if base.brightness is not None:
        p = cfg.brightness_p if cfg.brightness_p is not None else base.brightness.probability
        if cfg.brightness_mode == "constant":
            changes["brightness"] = BrightnessConfig(probability=p, mode="constant",
                                                     rate=cfg.brightness_r)
        else:
            changes["brightness"] = BrightnessConfig(probability=p, mode="random_range",
                                                     lower=cfg.brightness_lower)
    if base.diversity is not None:
        p = cfg.diversity_p if cfg.diversity_p is not None else base.diversity.probability
        changes["diversity"] = DiverseInputConfig(probability=p,
                                                  min_scale=cfg.diversity_min_scale)
    return dc_replace(base, **changes) if changes else base
