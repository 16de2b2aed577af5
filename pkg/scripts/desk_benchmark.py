"""End-to-end desk benchmark: train the zoo, run the single-model matrix,
the ensemble/hold-out protocol, and the three brightness sweeps, then write
every table and a timing summary.

Usage:
    python scripts/desk_benchmark.py --out runs/desk --seed 7 [--eval-limit 500]
"""
import argparse
import json
import time
from pathlib import Path

from brightsign.cli import main as cli_main


def run(argv):
    code = cli_main(argv)
    if code != 0:
        raise SystemExit(f"command {' '.join(argv)} failed with exit code {code}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", type=Path, default=Path("runs/desk"))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--eval-limit", type=int, default=500)
    parser.add_argument("--workers", type=int, default=8)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg_path = args.out / "run.cfg"
    cfg_path.write_text(
        f"seed = {args.seed}\n"
        f"eval_limit = {args.eval_limit}\n"
        f"workers = {args.workers}\n"
    )
    base = ["--config", str(cfg_path), "--out", str(args.out)]

    timings = {}
    stages = [
        ("train", ["train", *base]),
        ("matrix", ["eval", *base, "--mode", "single"]),
        ("ensemble", ["eval", *base, "--mode", "ensemble"]),
        ("sweep_p", ["sweep", *base, "--param", "p", "--attack", "rt_mi_fgsm"]),
        ("sweep_r_range", ["sweep", *base, "--param", "r_range", "--attack", "rt_mi_fgsm"]),
        ("sweep_r_const", ["sweep", *base, "--param", "r_const", "--attack", "rt_mi_fgsm"]),
        ("visualize", ["visualize", *base, "--attack", "rt_dim", "--count", "6"]),
    ]
    total = time.perf_counter()
    for name, argv in stages:
        t0 = time.perf_counter()
        run(argv)
        timings[name] = round(time.perf_counter() - t0, 2)
        print(f"[{name}] {timings[name]} s")
    timings["total"] = round(time.perf_counter() - total, 2)
    (args.out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    print(f"done in {timings['total']} s; outputs in {args.out}")


if __name__ == "__main__":
    main()
