"""Run the two-level benchmark over several seeds and both variants; print and save a summary table.

    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --preset desk --out results/benchmark
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from abtck.bench import PRESETS, VARIANTS, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    ap.add_argument("--grid", type=int, default=100, help="points per axis of the scoring grid")
    ap.add_argument("--out", default="results/benchmark")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for variant in args.variants:
            res = run_benchmark(variant, seed, args.preset, n_grid=args.grid)
            xi = np.ravel(res.xi_field(n_samples=200, stride=7))
            row = {"variant": variant, "seed": seed, **res.report.to_dict(),
                   "xi_mean": float(xi.mean()), "xi_range": float(xi.max() - xi.min())}
            rows.append(row)
            logging.info("%s seed %d: mspe %.4f cvg %.3f leaves %.2f xi %.3f (range %.3f) %.0fs", variant, seed,
                         row["mspe"], row["cvg"], row["mean_leaves"], row["xi_mean"], row["xi_range"],
                         row["seconds"])
            (out / "runs.json").write_text(json.dumps(rows, indent=2))

    print(f"{'variant':8s} {'median MSPE':>12s} {'median CVG':>11s} {'median xi':>10s} {'median xi range':>16s}")
    for v in args.variants:
        sel = [r for r in rows if r["variant"] == v]
        med = lambda k: float(np.median([r[k] for r in sel]))
        print(f"{v:8s} {med('mspe'):12.4f} {med('cvg'):11.3f} {med('xi_mean'):10.3f} {med('xi_range'):16.3f}")
    if set(args.variants) == set(VARIANTS):
        wins = sum(a["mspe"] < b["mspe"] for a in rows if a["variant"] == "ABTCK"
                   for b in rows if b["variant"] == "ABCK" and b["seed"] == a["seed"])
        print(f"ABTCK better on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
