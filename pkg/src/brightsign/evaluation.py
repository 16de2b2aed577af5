"""Desk-scale transferability evaluation protocols.

Three experiment drivers built on the attack driver: a single-model matrix
(craft on each source, test on every target), an ensemble/hold-out protocol
(craft on the equal-weight ensemble of all models but one, test on the
ensemble members and on the hold-out), and hyper-parameter sweeps over the
brightness transform (probability, random-range lower bound, constant rate)
that rerun the hold-out protocol per grid point.

Tables carry success counts rather than rates, so every reported rate times
its n is an integer by construction.  Attack seeds derive only from the
master seed and the source/hold-out identity, never from the attack or the
swept value, which keeps comparisons paired and makes every degenerate sweep
point bit-identical to its baseline attack.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats as _scipy_stats

from . import rng as _rng
from .attacks import AttackConfig, EnsembleSpec, run_attack
from .data import Dataset, EvalSubset, filter_correct
from .nn import TrainedModel, predict_batch
from .transforms import BrightnessConfig

log = logging.getLogger(__name__)

AttackFactory = Callable[[str, int], AttackConfig]

# Default sweep grids.
PROBABILITY_GRID = tuple(i / 10 for i in range(11))
RANDOM_LOWER_GRID = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)
CONSTANT_RATE_GRID = (1 / 16, 1 / 8, 1 / 4, 3 / 8, 1 / 2, 5 / 8, 3 / 4, 1.0)


# --------------------------------------------------------------------------
# result containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SuccessCell:
    source: str
    attack: str
    target: str
    n: int
    successes: int
    white_box: bool

    @property
    def rate(self) -> float:
        return self.successes / self.n if self.n else 0.0


@dataclass(frozen=True)
class BudgetAudit:
    """Post-hoc check of one attack run against its L-inf budget."""

    source: str
    attack: str
    epsilon: float
    max_residual: float
    in_range: bool
    failed: int

    @property
    def passed(self) -> bool:
        return self.in_range and self.max_residual <= self.epsilon + 1e-12


@dataclass
class SuccessTable:
    kind: str                       # "single" | "ensemble"
    cells: list[SuccessCell]
    audits: list[BudgetAudit]

    def find(self, source: str, attack: str, target: str) -> SuccessCell:
        for cell in self.cells:
            if (cell.source, cell.attack, cell.target) == (source, attack, target):
                return cell
        raise KeyError((source, attack, target))


@dataclass(frozen=True)
class SweepCell:
    parameter: str
    value: float
    target: str
    n: int
    successes: int
    white_box: bool

    @property
    def rate(self) -> float:
        return self.successes / self.n if self.n else 0.0


@dataclass
class SweepCurve:
    parameter: str                  # "p" | "r_range_lower" | "r_constant"
    attack: str
    values: tuple[float, ...]
    cells: list[SweepCell]
    audits: list[BudgetAudit]

    def series(self, target: str, white_box: bool) -> list[SweepCell]:
        return [c for c in self.cells if c.target == target and c.white_box == white_box]


# --------------------------------------------------------------------------
# basic measurements
# --------------------------------------------------------------------------

def success_rate(target: TrainedModel, adversarial, labels) -> float:
    """Fraction of adversarial examples the target model gets wrong."""
    adversarial = np.asarray(adversarial, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(adversarial) == 0:
        raise ValueError("success_rate needs a non-empty batch")
    return float((predict_batch(target, adversarial) != labels).mean())


def count_misclassified(target: TrainedModel, adversarial, labels) -> int:
    labels = np.asarray(labels, dtype=np.int64)
    return int((predict_batch(target, adversarial) != labels).sum())


def build_eval_subset(dataset: Dataset, models, limit: Optional[int] = None) -> EvalSubset:
    """Examples all models classify correctly, truncated to the first `limit`."""
    subset = filter_correct(dataset, list(models))
    if limit is not None:
        subset = subset.truncate(limit)
    return subset


def _audit(source: str, attack: str, cfg: AttackConfig, clean, result) -> BudgetAudit:
    residual = float(np.abs(result.adversarial - clean).max()) if clean.size else 0.0
    in_range = bool(result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0) \
        if clean.size else True
    return BudgetAudit(source, attack, cfg.epsilon, residual, in_range, result.failed_count)


def _run_jobs(jobs, fn, workers: int):
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# single-model matrix
# --------------------------------------------------------------------------

def single_model_matrix(sources, attack_names, targets, dataset: Dataset,
                        subset: EvalSubset, attack_factory: AttackFactory,
                        master_seed: int, workers: int = 1) -> SuccessTable:
    """One adversarial batch per (source, attack), evaluated on every target."""
    images = dataset.images[subset.indices]
    labels = dataset.labels[subset.indices]
    jobs = [(si, source, name) for si, source in enumerate(sources) for name in attack_names]

    def run(job):
        si, source, name = job
        seed = _rng.substream_seed(master_seed, _rng.DOMAIN_EVAL, 1, si)
        cfg = attack_factory(name, seed)
        result = run_attack(source, images, labels, cfg)
        ok = result.ok
        if result.failed_count:
            log.warning("matrix %s/%s: %d examples excluded (non-finite)",
                        source.name, name, result.failed_count)
        adv, lab = result.adversarial[ok], labels[ok]
        cells = []
        for target in targets:
            successes = count_misclassified(target, adv, lab) if ok.any() else 0
            cells.append(SuccessCell(source.name, name, target.name, int(ok.sum()),
                                     successes, white_box=(target.name == source.name)))
        return cells, _audit(source.name, name, cfg, images, result)

    table = SuccessTable("single", [], [])
    for cells, audit in _run_jobs(jobs, run, workers):
        table.cells.extend(cells)
        table.audits.append(audit)
    return table


# --------------------------------------------------------------------------
# ensemble / hold-out protocol
# --------------------------------------------------------------------------

def _holdout_point(models, attack_names, images, labels, cfg_for, master_seed, workers):
    """Run every (hold-out, attack) job; returns raw tuples for the callers.

    Each tuple: (holdout_name, attack, white_box, n, successes, audit|None).
    The white-box number pools misclassification counts over the ensemble
    members (its rate is the mean per-member rate).
    """
    jobs = [(hi, name) for hi in range(len(models)) for name in attack_names]

    def run(job):
        hi, name = job
        holdout = models[hi]
        members = tuple(m for i, m in enumerate(models) if i != hi)
        spec = EnsembleSpec(members)
        seed = _rng.substream_seed(master_seed, _rng.DOMAIN_EVAL, 2, hi)
        cfg = cfg_for(name, seed)
        result = run_attack(spec, images, labels, cfg)
        ok = result.ok
        if result.failed_count:
            log.warning("holdout %s/%s: %d examples excluded (non-finite)",
                        holdout.name, name, result.failed_count)
        adv, lab = result.adversarial[ok], labels[ok]
        n_ok = int(ok.sum())
        member_hits = sum(count_misclassified(m, adv, lab) for m in members) if n_ok else 0
        holdout_hits = count_misclassified(holdout, adv, lab) if n_ok else 0
        audit = _audit(f"-{holdout.name}", name, cfg, images, result)
        return (holdout.name, name,
                (len(members) * n_ok, member_hits),   # white box (pooled members)
                (n_ok, holdout_hits),                 # black box (hold-out)
                audit)

    return _run_jobs(jobs, run, workers)


def ensemble_holdout(models, attack_names, dataset: Dataset, subset: EvalSubset,
                     attack_factory: AttackFactory, master_seed: int,
                     workers: int = 1) -> SuccessTable:
    """Craft on the equal-weight ensemble of all models but one; report the
    pooled ensemble (white-box) rate and the hold-out (black-box) rate."""
    models = list(models)
    if len(models) < 2:
        raise ValueError(f"ensemble_holdout needs at least 2 models, got {len(models)}")
    images = dataset.images[subset.indices]
    labels = dataset.labels[subset.indices]
    table = SuccessTable("ensemble", [], [])
    for holdout_name, attack, wb, bb, audit in _holdout_point(
            models, attack_names, images, labels, attack_factory, master_seed, workers):
        source = f"-{holdout_name}"
        table.cells.append(SuccessCell(source, attack, "ensemble", wb[0], wb[1], True))
        table.cells.append(SuccessCell(source, attack, holdout_name, bb[0], bb[1], False))
        table.audits.append(audit)
    return table


# --------------------------------------------------------------------------
# hyper-parameter sweeps
# --------------------------------------------------------------------------

def _sweep(parameter: str, models, base_attack: str, dataset, subset,
           attack_factory: AttackFactory, master_seed: int, values,
           mutate, workers: int) -> SweepCurve:
    models = list(models)
    if len(models) < 2:
        raise ValueError(f"sweeps need at least 2 models, got {len(models)}")
    values = tuple(float(v) for v in values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"sweep values must be strictly increasing, got {values}")
    images = dataset.images[subset.indices]
    labels = dataset.labels[subset.indices]
    curve = SweepCurve(parameter, base_attack, values, [], [])
    for value in values:
        def cfg_for(name, seed, _v=value):
            return mutate(attack_factory(name, seed), _v)
        for holdout_name, attack, wb, bb, audit in _holdout_point(
                models, [base_attack], images, labels, cfg_for, master_seed, workers):
            curve.cells.append(SweepCell(parameter, value, holdout_name, wb[0], wb[1], True))
            curve.cells.append(SweepCell(parameter, value, holdout_name, bb[0], bb[1], False))
            curve.audits.append(audit)
    return curve


def sweep_probability(models, base_attack: str, dataset, subset,
                      attack_factory: AttackFactory, master_seed: int,
                      values=PROBABILITY_GRID, workers: int = 1) -> SweepCurve:
    """Hold-out protocol across brightness probabilities; 0 reproduces the
    untransformed baseline bit for bit."""
    if base_attack not in ("rt_mi_fgsm", "rt_dim"):
        raise ValueError(f"probability sweep expects rt_mi_fgsm or rt_dim, got {base_attack!r}")

    def mutate(cfg, value):
        return replace(cfg, brightness=replace(cfg.brightness, probability=value))

    return _sweep("p", models, base_attack, dataset, subset, attack_factory,
                  master_seed, values, mutate, workers)


def sweep_random_r(models, base_attack: str, dataset, subset,
                   attack_factory: AttackFactory, master_seed: int,
                   values=RANDOM_LOWER_GRID, workers: int = 1) -> SweepCurve:
    """Sweep the lower bound of the random brightness range (lower, 1]."""
    if base_attack not in ("rt_mi_fgsm", "rt_dim"):
        raise ValueError(f"range sweep expects rt_mi_fgsm or rt_dim, got {base_attack!r}")

    def mutate(cfg, value):
        bright = replace(cfg.brightness, mode="random_range", lower=value)
        return replace(cfg, brightness=bright)

    return _sweep("r_range_lower", models, base_attack, dataset, subset, attack_factory,
                  master_seed, values, mutate, workers)


def sweep_constant_r(models, base_attack: str, dataset, subset,
                     attack_factory: AttackFactory, master_seed: int,
                     values=CONSTANT_RATE_GRID, workers: int = 1) -> SweepCurve:
    """Sweep a constant brightness rate, applied every iteration (p = 1)."""
    if base_attack not in ("rt_mi_fgsm", "rt_dim"):
        raise ValueError(f"constant sweep expects rt_mi_fgsm or rt_dim, got {base_attack!r}")

    def mutate(cfg, value):
        bright = BrightnessConfig(probability=1.0, mode="constant", rate=value)
        return replace(cfg, brightness=bright)

    return _sweep("r_constant", models, base_attack, dataset, subset, attack_factory,
                  master_seed, values, mutate, workers)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def pooled_counts(cells, predicate) -> tuple[int, int]:
    """(successes, n) summed over the cells matching `predicate`."""
    hits = sum(c.successes for c in cells if predicate(c))
    n = sum(c.n for c in cells if predicate(c))
    return hits, n


def proportion_greater(successes_a: int, n_a: int, successes_b: int, n_b: int,
                       confidence: float = 0.95) -> tuple[bool, float]:
    """One-sided two-proportion z-test that rate A exceeds rate B.

    Returns (significant, z).  Degenerate pooled rates (0 or 1) can never be
    significant, matching the zero-variance limit.
    """
    if min(n_a, n_b) <= 0:
        raise ValueError("both samples must be non-empty")
    pa, pb = successes_a / n_a, successes_b / n_b
    pooled = (successes_a + successes_b) / (n_a + n_b)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b))
    if se == 0.0:
        return False, 0.0
    z = (pa - pb) / se
    return bool(z > _scipy_stats.norm.ppf(confidence)), float(z)


def spearman_rho(xs, ys) -> float:
    rho = _scipy_stats.spearmanr(xs, ys).statistic
    return float(rho)


def calibrate_whitebox(model, images, labels, attack_name: str, base_epsilon: float,
                       iterations: int, seed: int, target_rate: float = 0.95,
                       step: float = 1 / 255, max_epsilon: float = 64 / 255):
    """Raise epsilon in fixed steps until the white-box rate meets the target.

    Returns the list of (epsilon, rate) visited; raises if max_epsilon is
    exhausted without converging.
    """
    from .attacks import preset

    history = []
    epsilon = base_epsilon
    while epsilon <= max_epsilon + 1e-12:
        cfg = preset(attack_name, epsilon, iterations, seed=seed)
        result = run_attack(model, images, labels, cfg)
        ok = result.ok
        rate = success_rate(model, result.adversarial[ok], labels[ok])
        history.append((epsilon, rate))
        if rate >= target_rate:
            return history
        epsilon += step
    raise RuntimeError(
        f"white-box calibration did not reach {target_rate:.0%} by epsilon={max_epsilon}: "
        + ", ".join(f"{e:.4f}->{r:.3f}" for e, r in history)
    )


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

def emit_report(table_or_curve, fmt: str, path) -> Path:
    """Write a SuccessTable or SweepCurve as CSV or Markdown, byte-deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"format must be csv or markdown, got {fmt!r}")
    if isinstance(table_or_curve, SuccessTable):
        text = _table_csv(table_or_curve) if fmt == "csv" else _table_markdown(table_or_curve)
    elif isinstance(table_or_curve, SweepCurve):
        text = _curve_csv(table_or_curve) if fmt == "csv" else _curve_markdown(table_or_curve)
    else:
        raise ValueError(f"cannot emit {type(table_or_curve).__name__}")
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _rate_str(successes: int, n: int) -> str:
    return f"{successes / n:.4f}" if n else "0.0000"


def _table_csv(table: SuccessTable) -> str:
    lines = ["source,attack,target,n,success_rate,white_box"]
    for c in table.cells:
        lines.append(f"{c.source},{c.attack},{c.target},{c.n},{_rate_str(c.successes, c.n)},"
                     f"{1 if c.white_box else 0}")
    return "\n".join(lines) + "\n"


def _curve_csv(curve: SweepCurve) -> str:
    lines = ["parameter,value,target,n,success_rate,white_box"]
    for c in curve.cells:
        lines.append(f"{c.parameter},{c.value!r},{c.target},{c.n},"
                     f"{_rate_str(c.successes, c.n)},{1 if c.white_box else 0}")
    return "\n".join(lines) + "\n"


def parse_report(path):
    """Inverse of emit_report for CSV files (counts recovered from rate * n)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0]
    rows = [line.split(",") for line in lines[1:] if line]
    if header.startswith("source,"):
        table = SuccessTable("parsed", [], [])
        for source, attack, target, n, rate, wb in rows:
            n = int(n)
            table.cells.append(SuccessCell(source, attack, target, n,
                                           round(float(rate) * n), wb == "1"))
        return table
    if header.startswith("parameter,"):
        curve = SweepCurve("parsed", "parsed", (), [], [])
        for parameter, value, target, n, rate, wb in rows:
            n = int(n)
            curve.cells.append(SweepCell(parameter, float(value), target, n,
                                         round(float(rate) * n), wb == "1"))
        curve.parameter = curve.cells[0].parameter if curve.cells else "parsed"
        curve.values = tuple(sorted({c.value for c in curve.cells}))
        return curve
    raise ValueError(f"{path}: unrecognized report header {header!r}")


def _cell_md(c) -> str:
    return _rate_str(c.successes, c.n) + ("*" if c.white_box else "")


def _table_markdown(table: SuccessTable) -> str:
    if table.kind == "ensemble":
        return _ensemble_markdown(table)
    targets = list(dict.fromkeys(c.target for c in table.cells))
    pairs = list(dict.fromkeys((c.source, c.attack) for c in table.cells))
    lines = ["| Model | Attack | " + " | ".join(targets) + " |",
             "|" + "---|" * (2 + len(targets))]
    previous_source = None
    for source, attack in pairs:
        by_target = {c.target: c for c in table.cells
                     if c.source == source and c.attack == attack}
        cells = " | ".join(_cell_md(by_target[t]) if t in by_target else "" for t in targets)
        shown = source if source != previous_source else ""
        lines.append(f"| {shown} | {attack} | {cells} |")
        previous_source = source
    return "\n".join(lines) + "\n"


def _ensemble_markdown(table: SuccessTable) -> str:
    holdouts = list(dict.fromkeys(c.source for c in table.cells))
    attacks = list(dict.fromkeys(c.attack for c in table.cells))
    lines = ["| | Attack | " + " | ".join(holdouts) + " |",
             "|" + "---|" * (2 + len(holdouts))]
    for block, white in (("Ensemble", True), ("Hold-out", False)):
        for ai, attack in enumerate(attacks):
            row = []
            for source in holdouts:
                match = [c for c in table.cells
                         if c.source == source and c.attack == attack and c.white_box == white]
                row.append(_cell_md(match[0]) if match else "")
            label = block if ai == 0 else ""
            lines.append(f"| {label} | {attack} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _curve_markdown(curve: SweepCurve) -> str:
    targets = list(dict.fromkeys(c.target for c in curve.cells))
    header = [f"{t} ({'wb' if w else 'bb'})" for t in targets for w in (True, False)]
    lines = [f"| {curve.parameter} | " + " | ".join(header) + " |",
             "|" + "---|" * (1 + len(header))]
    for value in curve.values:
        row = []
        for t in targets:
            for white in (True, False):
                match = [c for c in curve.cells
                         if c.value == value and c.target == t and c.white_box == white]
                row.append(_rate_str(match[0].successes, match[0].n) if match else "")
        lines.append(f"| {value!r} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
