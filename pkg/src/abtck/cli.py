"""Command-line entry point: ``abtck {fit,predict,impute,benchmark}``.

Exit codes: 0 success, 1 numerical failure, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .bench import PRESETS, VARIANTS, RunConfig, apply_preset, cmd_benchmark, cmd_fit, cmd_impute, cmd_predict
from .errors import ConfigError, DomainError, NumericalSingularityError

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("abtck")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="abtck", description="Augmented Bayesian treed co-kriging")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="run the sampler on the data named in a config file")
    fit.add_argument("--config", required=True)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--preset", choices=sorted(PRESETS))
    fit.add_argument("--out", help="output directory (overrides out_dir)")

    pr = sub.add_parser("predict", help="predictive summaries at query points")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--query", required=True, help="CSV with header x1,...,xm")
    pr.add_argument("--out", required=True, help="output CSV")
    pr.add_argument("--config", help="take n_samples, alpha and level from this config")
    pr.add_argument("--level", type=int, help="only this fidelity level (1-based)")
    pr.add_argument("--n-samples", type=int)
    pr.add_argument("--seed", type=int, default=0)

    im = sub.add_parser("impute", help="Rao-Blackwell estimates of the missing outputs")
    im.add_argument("--trace", required=True)
    im.add_argument("--out", required=True)
    im.add_argument("--config", help="accepted for symmetry; not needed")

    bm = sub.add_parser("benchmark", help="two-level synthetic benchmark")
    bm.add_argument("--variant", choices=VARIANTS, default="ABTCK")
    bm.add_argument("--seed", type=int, default=0)
    bm.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    bm.add_argument("--out", help="directory for trace, grid predictions and metrics")
    bm.add_argument("--config", help="accepted for symmetry; the benchmark is self-contained")
    return ap


def _run(args) -> int:
    if args.command == "fit":
        cfg = RunConfig.load(args.config)
        mcmc = apply_preset(cfg.mcmc, args.preset)
        if args.seed is not None:
            mcmc = type(mcmc)(**{**mcmc.to_dict(), "seed": args.seed})
        cfg.mcmc = mcmc
        if args.out:
            cfg.out_dir = args.out
        trace, report = cmd_fit(cfg)
        out = {"samples": len(trace), "acceptance": trace.acceptance_rates(),
               "mean_leaves": trace.mean_leaves() if len(trace) else None}
        if report is not None:
            out["metrics"] = report.to_dict()
        print(json.dumps(out, indent=2))
    elif args.command == "predict":
        n_samples, alpha, level = 100, 0.05, args.level
        if args.config:
            pc = RunConfig.load(args.config).predict
            n_samples, alpha = pc.n_samples, pc.alpha
            level = level if level is not None else pc.level
        if args.n_samples is not None:
            n_samples = args.n_samples
        cmd_predict(args.trace, args.query, args.out, level, n_samples, alpha, args.seed)
    elif args.command == "impute":
        rows = cmd_impute(args.trace, args.out)
        print(f"{sum(len(r['index']) for r in rows)} missing outputs written to {args.out}")
    elif args.command == "benchmark":
        report = cmd_benchmark(args.variant, args.seed, args.preset, out_dir=args.out)
        print(json.dumps({"variant": args.variant, "seed": args.seed, **report.to_dict()}, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return _run(args)
    except NumericalSingularityError as exc:
        print(f"abtck: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DomainError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"abtck: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
