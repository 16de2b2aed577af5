"""Command-line surface: train the model zoo, craft attacks, build the
evaluation tables, run the hyper-parameter sweeps, export images.

Every command echoes its fully resolved configuration to the output
directory before doing any work, and all randomness flows from the single
`seed` key.  Exit codes: 0 success, 2 configuration errors, 1 runtime
failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import rng as _rng
from . import zoo
from .attacks import AttackConfig, run_attack, write_trace
from .config import ConfigError, RunConfig, attack_config_from, load_config, render_config
from .data import export_images, generate_synthetic, load_idx
from .evaluation import (
    build_eval_subset,
    emit_report,
    ensemble_holdout,
    single_model_matrix,
    sweep_constant_r,
    sweep_probability,
    sweep_random_r,
)
from .transforms import random_brightness

log = logging.getLogger("brightsign")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brightsign",
                                     description="sign-gradient attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("train", help="train and persist the 7-model zoo")
    common(p)

    p = sub.add_parser("attack", help="craft one adversarial batch plus its trace")
    common(p)
    p.add_argument("--source", required=True, help="source model name")
    p.add_argument("--attack", required=True, help="attack preset name")

    p = sub.add_parser("eval", help="single-model matrix or ensemble hold-out tables")
    common(p)
    p.add_argument("--mode", choices=("single", "ensemble"), default="single")

    p = sub.add_parser("sweep", help="brightness hyper-parameter sweeps")
    common(p)
    p.add_argument("--param", choices=("p", "r_range", "r_const"), required=True)
    p.add_argument("--attack", choices=("rt_mi_fgsm", "rt_dim"), default="rt_mi_fgsm")

    p = sub.add_parser("visualize", help="export original/transformed/adversarial triplets")
    common(p)
    p.add_argument("--attack", default="rt_dim")
    p.add_argument("--source", default="cnn_a")
    p.add_argument("--count", type=int, default=6)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        cfg.seed = args.seed
    return cfg


def _build_datasets(cfg: RunConfig):
    size = (cfg.channels, cfg.image_size, cfg.image_size)
    if cfg.dataset == "synthetic":
        full = generate_synthetic(cfg.train_examples + cfg.eval_examples, cfg.class_count,
                                  size, cfg.seed)
        train_ds = full.subset(np.arange(cfg.train_examples))
        eval_ds = full.subset(np.arange(cfg.train_examples,
                                        cfg.train_examples + cfg.eval_examples))
        return train_ds, eval_ds
    train_ds = load_idx(cfg.train_idx_images, cfg.train_idx_labels, cfg.class_count)
    eval_ds = load_idx(cfg.eval_idx_images, cfg.eval_idx_labels, cfg.class_count)
    return train_ds, eval_ds


def _model_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.model_dir) if cfg.model_dir else out / "models"


def _load_zoo_or_fail(cfg: RunConfig, out: Path):
    return zoo.load_zoo(_model_dir(cfg, out))


def _factory(cfg: RunConfig):
    return lambda name, seed: attack_config_from(cfg, name, seed)


def echo_attack_config(cfg: AttackConfig) -> str:
    lines = [
        f"name = {cfg.name}",
        f"epsilon = {cfg.epsilon!r}",
        f"iterations = {cfg.iterations}",
        f"step = {cfg.resolved_step!r}",
        f"decay = {cfg.decay!r}",
        f"random_start = {cfg.random_start}",
        f"seed = {cfg.seed}",
    ]
    if cfg.brightness is not None:
        b = cfg.brightness
        lines += [f"brightness_p = {b.probability!r}", f"brightness_mode = {b.mode}",
                  f"brightness_lower = {b.lower!r}", f"brightness_r = {b.rate!r}"]
    if cfg.diversity is not None:
        d = cfg.diversity
        lines += [f"diversity_p = {d.probability!r}", f"diversity_min_scale = {d.min_scale!r}"]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args, out: Path) -> None:
    train_ds, eval_ds = _build_datasets(cfg)
    models = zoo.train_zoo(train_ds, cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size,
                           learning_rate=cfg.learning_rate, sgd_momentum=cfg.sgd_momentum,
                           adversarial_mix=cfg.adversarial_mix,
                           adversarial_epsilon=cfg.adversarial_epsilon / 255.0)
    model_dir = _model_dir(cfg, out)
    zoo.save_zoo(models, model_dir, extra={"seed": cfg.seed})
    from .nn import accuracy
    for model in models:
        clean = accuracy(model, eval_ds.images, eval_ds.labels)
        print(f"{model.name}: train_accuracy={model.train_accuracy:.4f} "
              f"eval_accuracy={clean:.4f} kind={model.training_kind}")
    print(f"saved {len(models)} models to {model_dir}")


def cmd_attack(cfg: RunConfig, args, out: Path) -> None:
    models = _load_zoo_or_fail(cfg, out)
    by_name = {m.name: m for m in models}
    if args.source not in by_name:
        raise ConfigError(f"unknown source model {args.source!r}; "
                          f"available: {', '.join(by_name)}")
    source = by_name[args.source]
    _, eval_ds = _build_datasets(cfg)
    subset = build_eval_subset(eval_ds, models, cfg.eval_limit)
    seed = _rng.substream_seed(cfg.seed, _rng.DOMAIN_EVAL, 0)
    attack_cfg = attack_config_from(cfg, args.attack, seed)
    (out / "attack_resolved.txt").write_text(echo_attack_config(attack_cfg), encoding="utf-8")
    images = eval_ds.images[subset.indices]
    labels = eval_ds.labels[subset.indices]
    result = run_attack(source, images, labels, attack_cfg)
    batch_path = out / f"adv_{args.source}_{args.attack}.npz"
    np.savez(batch_path, adversarial=result.adversarial, clean=images, labels=labels,
             indices=subset.indices, ok=result.ok)
    write_trace(result, out / f"trace_{args.source}_{args.attack}.tsv")
    print(f"crafted {len(images)} examples on {args.source} with {args.attack}; "
          f"source success rate {result.misclassified.mean():.4f}; "
          f"{result.failed_count} failed")
    print(f"saved batch to {batch_path}")


def cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    models = _load_zoo_or_fail(cfg, out)
    _, eval_ds = _build_datasets(cfg)
    subset = build_eval_subset(eval_ds, models, cfg.eval_limit)
    factory = _factory(cfg)
    if args.mode == "single":
        table = single_model_matrix(zoo.normal_models(models), cfg.attacks, models,
                                    eval_ds, subset, factory, cfg.seed, cfg.workers)
        stem = "single_matrix"
    else:
        table = ensemble_holdout(models, cfg.attacks, eval_ds, subset, factory,
                                 cfg.seed, cfg.workers)
        stem = "ensemble_holdout"
    emit_report(table, "csv", out / f"{stem}.csv")
    emit_report(table, "markdown", out / f"{stem}.md")
    bad = [a for a in table.audits if not a.passed]
    if bad:
        raise RuntimeError(f"{len(bad)} attack runs violated the epsilon budget")
    print(f"wrote {out / (stem + '.csv')} ({len(table.cells)} cells, n={len(subset)})")


_SWEEPS = {
    "p": sweep_probability,
    "r_range": sweep_random_r,
    "r_const": sweep_constant_r,
}


def cmd_sweep(cfg: RunConfig, args, out: Path) -> None:
    models = _load_zoo_or_fail(cfg, out)
    _, eval_ds = _build_datasets(cfg)
    subset = build_eval_subset(eval_ds, models, cfg.eval_limit)
    curve = _SWEEPS[args.param](models, args.attack, eval_ds, subset, _factory(cfg),
                                cfg.seed, workers=cfg.workers)
    emit_report(curve, "csv", out / f"sweep_{args.param}.csv")
    emit_report(curve, "markdown", out / f"sweep_{args.param}.md")
    print(f"wrote sweep_{args.param}.csv ({len(curve.values)} points, attack {args.attack})")


def cmd_visualize(cfg: RunConfig, args, out: Path) -> None:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    models = _load_zoo_or_fail(cfg, out)
    by_name = {m.name: m for m in models}
    if args.source not in by_name:
        raise ConfigError(f"unknown source model {args.source!r}")
    _, eval_ds = _build_datasets(cfg)
    subset = build_eval_subset(eval_ds, models, args.count)
    images = eval_ds.images[subset.indices]
    labels = eval_ds.labels[subset.indices]
    seed = _rng.substream_seed(cfg.seed, _rng.DOMAIN_EVAL, 0)
    attack_cfg = attack_config_from(cfg, args.attack, seed)

    transformed = images.copy()
    if attack_cfg.brightness is not None:
        for i in range(len(images)):
            transformed[i], _ = random_brightness(
                images[i], attack_cfg.brightness,
                _rng.substream_seed(cfg.seed, _rng.DOMAIN_EVAL, 9, i))
    result = run_attack(by_name[args.source], images, labels, attack_cfg)

    paths = export_images(images, out, "original")
    paths += export_images(transformed, out, "transformed")
    paths += export_images(result.adversarial, out, "adversarial")
    print(f"wrote {len(paths)} images to {out}")


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.txt").write_text(render_config(cfg), encoding="utf-8")
        _COMMANDS[args.command](cfg, args, out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: distinct exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
