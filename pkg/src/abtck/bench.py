"""Run configuration, metrics, the two-level synthetic benchmark and the command implementations.

The command functions here do the work behind ``abtck fit``, ``predict``,
``impute`` and ``benchmark``; :mod:`abtck.cli` only parses arguments and maps
exceptions to exit codes.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .design import Domain, FidelityDataset, FidelityLevel, lhs_sample, read_level_csv
from .emulator import (
    posterior_draws,
    predictive_summary,
    rao_blackwell_missing,
    scale_discrepancy_field,
    write_predictions_csv,
)
from .errors import ConfigError, DomainError
from .gpcore import BasisSpec, GammaMixture, ModelSpec, NIGPrior
from .sampler import McmcConfig, PosteriorTrace, run_sampler

log = logging.getLogger("abtck")

BENCH_DOMAIN = Domain(np.array([[-2.0, 6.0], [-2.0, 6.0]]))
PRESETS = {"desk": (5000, 1000), "full": (25000, 5000)}
VARIANTS = ("ABTCK", "ABCK")


# ---------------------------------------------------------------- benchmark

def benchmark_functions(x, level: int):
    """Low (``level=1``) and high (``level=2``) fidelity test functions on ``[-2, 6]^2``.

    Accepts one 2-vector (returns a float) or an ``(n, 2)`` array.
    """
    if level not in (1, 2):
        raise ConfigError(f"benchmark level must be 1 or 2, got {level}")
    arr = np.asarray(x, dtype=float)
    X = np.atleast_2d(arr)
    if X.shape[1] != 2:
        raise DomainError(f"benchmark inputs are 2-dimensional, got shape {arr.shape}")
    BENCH_DOMAIN.check(X, what="benchmark inputs")
    x1, x2 = X[:, 0], X[:, 1]
    bump = x1 * np.exp(-x1**2 - x2**2)
    wave = np.exp(np.sin(0.9 * ((x1 + 2.0) / 8.0 + 0.48) ** 10))
    out = 2.0 * bump + 0.5 * wave + 1.2 if level == 1 else 4.0 * bump + 0.2 * wave + 0.5
    return float(out[0]) if arr.ndim == 1 else out


def benchmark_dataset(seed: int, n1: int = 120, n2: int = 30) -> FidelityDataset:
    """Independent LHS designs per level, so the top design is (almost surely) not nested."""
    ss = np.random.SeedSequence(seed).spawn(2)
    X1 = lhs_sample(n1, BENCH_DOMAIN, np.random.default_rng(ss[0]))
    X2 = lhs_sample(n2, BENCH_DOMAIN, np.random.default_rng(ss[1]))
    return FidelityDataset([FidelityLevel(X1, benchmark_functions(X1, 1)),
                            FidelityLevel(X2, benchmark_functions(X2, 2))], BENCH_DOMAIN)


def benchmark_model() -> ModelSpec:
    basis = BasisSpec.constant(2)
    return ModelSpec(basis, NIGPrior.build(basis, 2, b=0.0, B=10.0, g=0.0, G=10.0, lam=2.0, chi=2.0,
                                           phi=GammaMixture((0.5, 0.5), (1.0, 10.0), (20.0, 10.0))))


def benchmark_grid(n: int = 100) -> np.ndarray:
    g = np.linspace(-2.0, 6.0, n)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    mspe: float
    nsme: float
    cvg: float
    level: int
    seconds: float = float("nan")
    acceptance: dict = field(default_factory=dict)
    mean_leaves: float = float("nan")

    def to_dict(self):
        return asdict(self)


def compute_metrics(mean, lo, hi, truth):
    """MSPE, Nash-Sutcliffe efficiency and interval coverage.

    Returns ``(mspe, nsme, cvg)``.  Coverage counts the closed interval, so a
    degenerate interval at the truth counts as covered.
    """
    mean, lo, hi, truth = (np.asarray(v, dtype=float).ravel() for v in (mean, lo, hi, truth))
    if not (len(mean) == len(lo) == len(hi) == len(truth)):
        raise ConfigError("prediction and truth lengths differ")
    if len(truth) == 0:
        raise ConfigError("no points to score")
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0.0:
        raise ValueError("NSME is undefined for a constant truth vector")
    err = truth - mean
    mspe = float(np.mean(err**2))
    nsme = float(1.0 - np.sum(err**2) / ss_tot)
    cvg = float(np.mean((truth >= lo) & (truth <= hi)))
    return mspe, nsme, cvg


def metrics_report(summary, truth, seconds=float("nan"), trace=None) -> MetricsReport:
    mspe, nsme, cvg = compute_metrics(summary.mean, summary.lo, summary.hi, truth)
    acc = trace.acceptance_rates() if trace is not None else {}
    K = trace.mean_leaves() if trace is not None and len(trace) else float("nan")
    return MetricsReport(mspe, nsme, cvg, summary.level + 1, seconds, acc, K)


# ---------------------------------------------------------------- run config

def _check_keys(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


@dataclass
class PriorConfig:
    b: float = 0.0
    B: float = 10.0
    g: float = 0.0
    G: float = 10.0
    lam: float = 2.0
    chi: float = 2.0
    phi_weights: tuple = (0.5, 0.5)
    phi_shapes: tuple = (1.0, 10.0)
    phi_rates: tuple = (20.0, 10.0)

    def __post_init__(self):
        for name in ("phi_weights", "phi_shapes", "phi_rates"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.B <= 0 or self.G <= 0 or self.lam <= 0 or self.chi <= 0:
            raise ConfigError("B, G, lam and chi must be positive")

    def phi(self) -> GammaMixture:
        try:
            return GammaMixture(self.phi_weights, self.phi_shapes, self.phi_rates)
        except ValueError as exc:
            raise ConfigError(f"phi prior: {exc}") from None


@dataclass
class PredictConfig:
    query: str | None = None
    n_samples: int = 100
    alpha: float = 0.05
    level: int | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("predict.n_samples must be >= 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("predict.alpha must lie in [0, 1)")


@dataclass
class RunConfig:
    """Everything a ``fit``/``predict`` run needs; serializes to YAML.

    Relative paths are resolved against ``base_dir`` (the directory of the
    YAML file when loaded with :meth:`load`).
    """

    data: list
    bounds: list
    rescale: bool = False
    mean_degree: int | list = 0
    scale_degree: int | list = 0
    prior: PriorConfig = field(default_factory=PriorConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    test_data: str | None = None
    out_dir: str = "abtck_out"
    base_dir: str = "."

    def __post_init__(self):
        if isinstance(self.prior, dict):
            _check_keys(PriorConfig, self.prior, "prior")
            self.prior = PriorConfig(**self.prior)
        if isinstance(self.mcmc, dict):
            _check_keys(McmcConfig, self.mcmc, "mcmc")
            self.mcmc = McmcConfig(**self.mcmc)
        if isinstance(self.predict, dict):
            _check_keys(PredictConfig, self.predict, "predict")
            self.predict = PredictConfig(**self.predict)
        if not self.data:
            raise ConfigError("data: at least one level file is required")
        self.data = [str(p) for p in self.data]
        self.bounds = [[float(a), float(b)] for a, b in self.bounds]
        self.domain()
        for name in ("mean_degree", "scale_degree"):
            v = getattr(self, name)
            if isinstance(v, (list, tuple)):
                v = [int(d) for d in v]
                if any(d < 0 for d in v):
                    raise ConfigError(f"{name}: degrees must be >= 0")
            elif int(v) < 0:
                raise ConfigError(f"{name}: degrees must be >= 0")
            setattr(self, name, v)

    @property
    def n_levels(self) -> int:
        return len(self.data)

    def domain(self) -> Domain:
        try:
            return Domain(np.asarray(self.bounds, dtype=float))
        except DomainError as exc:
            raise ConfigError(f"bounds: {exc}") from None

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def _degrees(self, v, n):
        if isinstance(v, list):
            if len(v) != n:
                raise ConfigError(f"expected {n} degrees, got {len(v)}")
            return tuple(v)
        return (int(v),) * n

    def model(self) -> ModelSpec:
        S = self.n_levels
        basis = BasisSpec(self._degrees(self.mean_degree, S), self._degrees(self.scale_degree, max(S - 1, 0)))
        p = self.prior
        return ModelSpec(basis, NIGPrior.build(basis, len(self.bounds), b=p.b, B=p.B, g=p.g, G=p.G,
                                               lam=p.lam, chi=p.chi, phi=p.phi()))

    def dataset(self) -> FidelityDataset:
        """Observed data in input units (before any rescaling)."""
        dom = self.domain()
        levels = [FidelityLevel(*read_level_csv(self.path(p), dom.dim)) for p in self.data]
        return FidelityDataset(levels, dom)

    def to_dict(self):
        return {
            "data": list(self.data), "bounds": [list(b) for b in self.bounds], "rescale": self.rescale,
            "mean_degree": self.mean_degree, "scale_degree": self.scale_degree,
            "prior": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.prior).items()},
            "mcmc": self.mcmc.to_dict(), "predict": asdict(self.predict),
            "test_data": self.test_data, "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d, base_dir=".") -> "RunConfig":
        _check_keys(cls, d, "config")
        for key in ("data", "bounds"):
            if key not in d:
                raise ConfigError(f"config: missing required key '{key}'")
        try:
            return cls(**{**d, "base_dir": str(d.get("base_dir", base_dir))})
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            d = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d or {}, base_dir=str(path.parent))

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def apply_preset(cfg: McmcConfig, preset: str | None) -> McmcConfig:
    if preset is None:
        return cfg
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', choose from {sorted(PRESETS)}")
    n_iter, burn_in = PRESETS[preset]
    d = cfg.to_dict()
    d.update(n_iter=n_iter, burn_in=burn_in)
    return McmcConfig(**d)


def read_query_csv(path, m: int) -> np.ndarray:
    """Query inputs with header ``x1,...,xm`` (a trailing ``y`` column is ignored)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"query file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        return np.zeros((0, m))
    header = [h.strip() for h in rows[0]]
    names = [f"x{j + 1}" for j in range(m)]
    if header[:m] != names or header[m:] not in ([], ["y"]):
        raise ConfigError(f"{path}: header must be {','.join(names)}, got {header}")
    try:
        Q = np.array([[float(c) for c in r[:m]] for r in rows[1:]], dtype=float).reshape(-1, m)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(Q)):
        raise ConfigError(f"{path}: non-finite query value")
    return Q


# ---------------------------------------------------------------- commands

def _fit_space(data: FidelityDataset, rescale: bool):
    return (data.rescaled(), data.domain) if rescale else (data, None)


def _to_fit_space(trace: PosteriorTrace, X):
    if trace.input_domain is None:
        return X
    trace.input_domain.check(X, what="query points")
    return trace.input_domain.to_unit(X)


def _from_fit_space(trace: PosteriorTrace, X):
    return X if trace.input_domain is None else trace.input_domain.from_unit(X)


def predict_summaries(trace: PosteriorTrace, Xq, n_samples=100, alpha=0.05, levels=None, seed=0):
    """Per-level predictive summaries at ``Xq`` (input units)."""
    S = trace.data.n_levels
    levels = list(range(S)) if levels is None else list(levels)
    if len(Xq) == 0:
        return []
    draws = posterior_draws(trace, _to_fit_space(trace, Xq), np.random.default_rng(seed), n_samples)
    return [predictive_summary(draws, t, alpha) for t in levels]


def cmd_fit(cfg: RunConfig, progress=None):
    """Fit, write trace and diagnostics into ``out_dir``; score held-out data if configured.

    Returns ``(trace, report)`` where ``report`` is ``None`` without test data.
    """
    out = cfg.path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = cfg.dataset()
    data, input_domain = _fit_space(raw, cfg.rescale)
    model = cfg.model()
    t0 = time.perf_counter()
    trace = run_sampler(data, model, cfg.mcmc, progress=progress)
    seconds = time.perf_counter() - t0
    trace.input_domain = input_domain
    trace.save(out / "trace.jsonl")
    trace.write_iterations_csv(out / "iterations.csv")
    cfg.dump(out / "config.yaml")
    diag = {"seconds": seconds, "acceptance": trace.acceptance_rates(),
            "mean_leaves": trace.mean_leaves() if len(trace) else None, "n_samples": len(trace)}
    report = None
    if cfg.test_data is not None:
        Xt, yt = read_level_csv(cfg.path(cfg.test_data), raw.dim)
        S = raw.n_levels
        (summary,) = predict_summaries(trace, Xt, cfg.predict.n_samples, cfg.predict.alpha, [S - 1],
                                       seed=cfg.mcmc.seed)
        report = metrics_report(summary, yt, seconds, trace)
        diag["metrics"] = report.to_dict()
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    log.info("fit: %d retained samples in %.1fs -> %s", len(trace), seconds, out)
    return trace, report


def cmd_predict(trace_path, query_path, out_path, level=None, n_samples=100, alpha=0.05, seed=0):
    """Write per-level predictive mean, variance and interval at the query points.

    ``level`` is 1-based; ``None`` emits every level.
    """
    trace = PosteriorTrace.load(trace_path)
    m = trace.data.dim
    S = trace.data.n_levels
    if level is not None and not 1 <= level <= S:
        raise ConfigError(f"level must lie in 1..{S}, got {level}")
    Xq = read_query_csv(query_path, m)
    levels = None if level is None else [level - 1]
    summaries = predict_summaries(trace, Xq, n_samples, alpha, levels, seed)
    write_predictions_csv(out_path, Xq, summaries)
    return summaries


def cmd_impute(trace_path, out_path):
    """Write Rao-Blackwell and plain estimates of the imputed outputs, one row per missing point."""
    trace = PosteriorTrace.load(trace_path)
    if not trace.config.augmentation_enabled:
        raise ConfigError("trace was fitted with augmentation disabled; nothing was imputed")
    rows = rao_blackwell_missing(trace)
    m = trace.data.dim
    n = sum(len(r["index"]) for r in rows)
    if n == 0:
        log.warning("design is nested: there are no missing outputs to impute")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(m)] + ["level", "rb_mean", "plain_mean", "sd"])
        for r in rows:
            X = _from_fit_space(trace, r["X"])
            for i in range(len(r["index"])):
                w.writerow([repr(float(v)) for v in X[i]] + [r["level"] + 1] +
                           [repr(float(r[k][i])) for k in ("rb", "plain", "sd")])
    return rows


@dataclass
class BenchmarkResult:
    report: MetricsReport
    trace: PosteriorTrace
    grid: np.ndarray
    summary: object
    truth: np.ndarray

    def xi_field(self, n_samples: int | None = 200, stride: int = 1):
        """Posterior-mean scale discrepancy on (a subsample of) the prediction grid."""
        tr = self.trace
        if n_samples is not None and len(tr) > n_samples:
            keep = np.unique(np.linspace(0, len(tr) - 1, n_samples).round().astype(int))
            tr = PosteriorTrace(tr.data, tr.model, tr.config, [tr.samples[j] for j in keep],
                                tr.acceptance, [], tr.input_domain)
        return scale_discrepancy_field(tr, self.grid[::stride])


def run_benchmark(variant: str = "ABTCK", seed: int = 0, preset: str = "desk", n_grid: int = 100,
                  n_predict: int = 100, n1: int = 120, n2: int = 30, mcmc: McmcConfig | None = None,
                  progress=None) -> BenchmarkResult:
    """Fit one variant on a seeded benchmark design and score level-2 predictions on the grid."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got '{variant}'")
    base = mcmc if mcmc is not None else McmcConfig()
    d = apply_preset(base, preset if mcmc is None else None).to_dict()
    d.update(seed=seed, partition_enabled=variant == "ABTCK")
    cfg = McmcConfig(**d)
    data = benchmark_dataset(seed, n1, n2)
    t0 = time.perf_counter()
    trace = run_sampler(data, benchmark_model(), cfg, progress=progress)
    seconds = time.perf_counter() - t0
    grid = benchmark_grid(n_grid)
    truth = benchmark_functions(grid, 2)
    (summary,) = predict_summaries(trace, grid, n_predict, 0.05, [1], seed=seed)
    return BenchmarkResult(metrics_report(summary, truth, seconds, trace), trace, grid, summary, truth)


def cmd_benchmark(variant: str = "ABTCK", seed: int = 0, preset: str = "desk", out_dir=None,
                  **kwargs) -> MetricsReport:
    """Benchmark run; with ``out_dir`` also writes the grid predictions, trace and metrics."""
    res = run_benchmark(variant, seed, preset, **kwargs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.trace.save(out / "trace.jsonl")
        res.trace.write_iterations_csv(out / "iterations.csv")
        write_predictions_csv(out / "grid_predictions.csv", res.grid, [res.summary])
        (out / "metrics.json").write_text(json.dumps({"variant": variant, "seed": seed, "preset": preset,
                                                      **res.report.to_dict()}, indent=2))
    return res.report
