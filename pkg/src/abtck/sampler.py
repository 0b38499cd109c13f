"""Collapsed reversible-jump sampler over (missing outputs, tree, phi, s2, gamma, beta).

Each iteration applies three blocks in a freshly drawn random order:

* missing outputs, drawn level by level from their Gaussian full conditional;
* the tree and ``phi`` (grow, prune, change, swap, rotate) on the target with
  ``beta``, ``gamma`` and ``s2`` integrated out;
* per leaf and level, a log-scale random-walk step on ``phi`` followed by exact
  draws of ``s2``, ``gamma | s2`` and ``beta | gamma, s2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .design import AugmentedDesign, Domain, FidelityDataset, build_augmentation
from .errors import ConfigError, NumericalSingularityError
from .gpcore import (
    BasisSpec,
    ConjugateConditionals,
    GammaMixture,
    LevelParams,
    LevelPrior,
    ModelSpec,
    NIGPrior,
    cholesky,
    corr_matrix,
    hat_bundle,
    log_evidence,
    missing_conditional,
    scale_discrepancy,
)
from .treepart import (
    PartitionTree,
    SplitContext,
    TreePriorConfig,
    log_tree_prior,
    propose_change,
    propose_grow,
    propose_prune,
    propose_rotate,
    propose_swap,
)

TRACE_FORMAT = "abtck-trace"
TRACE_VERSION = 1
MOVES = ("grow", "prune", "change", "swap", "rotate")


@dataclass
class McmcConfig:
    n_iter: int = 5000
    burn_in: int = 1000
    thin: int = 1
    move_weights: dict = field(
        default_factory=lambda: {"change": 0.3, "swap": 0.1, "rotate": 0.1, "grow": 0.25, "prune": 0.25}
    )
    phi_step: float = 0.3
    seed: int = 0
    partition_enabled: bool = True
    augmentation_enabled: bool = True
    sample_beta: bool = True
    tree_prior: TreePriorConfig = field(default_factory=TreePriorConfig)

    def __post_init__(self):
        if isinstance(self.tree_prior, dict):
            mp = self.tree_prior.get("min_points")
            self.tree_prior = TreePriorConfig(**{**self.tree_prior, "min_points": None if mp is None else tuple(mp)})
        if self.n_iter <= 0:
            raise ConfigError("n_iter must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ConfigError(f"need 0 <= burn_in < n_iter, got burn_in={self.burn_in}, n_iter={self.n_iter}")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.phi_step <= 0:
            raise ConfigError("phi_step must be positive")
        unknown = set(self.move_weights) - set(MOVES)
        if unknown:
            raise ConfigError(f"unknown moves {sorted(unknown)}")
        w = np.array([self.move_weights.get(m, 0.0) for m in MOVES], dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("move weights must be nonnegative and sum to 1")

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.n_iter, self.thin))

    def to_dict(self):
        d = asdict(self)
        mp = self.tree_prior.min_points
        d["tree_prior"] = {"zeta": self.tree_prior.zeta, "d": self.tree_prior.d,
                           "min_points": None if mp is None else list(mp)}
        return d


def default_min_points(model: ModelSpec, m: int):
    S = model.n_levels
    b = model.basis
    return tuple(b.p(t, m) + (b.q(t - 1, m) if t else 0) + 2 for t in range(S))


@dataclass
class McmcState:
    """Current tree, leaf parameters and augmented data, plus a density cache.

    ``cache[(leaf, level)]`` holds ``(log density, HatBundle)`` at the current
    ``phi`` and data; it is dropped whenever either changes.
    """

    tree: PartitionTree
    params: dict
    aug: AugmentedDesign
    model: ModelSpec
    ctx: SplitContext
    tree_cfg: TreePriorConfig
    cache: dict = field(default_factory=dict)

    def invalidate(self, leaves=None, levels=None):
        if leaves is None and levels is None:
            self.cache.clear()
            return
        for key in list(self.cache):
            if (leaves is None or key[0] in leaves) and (levels is None or key[1] in levels):
                del self.cache[key]

    def block(self, leaf, level, idx=None):
        idx = self.aug.idx(leaf, level) if idx is None else idx
        P, V = self.aug.points, self.aug.values
        return P[idx], V[level, idx], (V[level - 1, idx] if level else None)

    def evaluate(self, leaf, level, phi, idx=None):
        """``(log marginal density, bundle)``; ``-inf`` on a singular system."""
        lp = self.model.prior.phi.logpdf(phi)
        if not math.isfinite(lp):
            return -math.inf, None
        X, y, yp = self.block(leaf, level, idx)
        try:
            b = hat_bundle(level, X, y, yp, phi, self.model)
        except NumericalSingularityError:
            return -math.inf, None
        return lp + log_evidence(b), b

    def density(self, leaf, level):
        hit = self.cache.get((leaf, level))
        if hit is None:
            hit = self.evaluate(leaf, level, self.params[leaf][level].phi)
            self.cache[(leaf, level)] = hit
        return hit

    def log_target(self) -> float:
        """Collapsed log target ``log pi(T) + sum_{k,t} log pi(y_{k,t}, phi_{k,t} | y_{k,t-1})``."""
        lp = log_tree_prior(self.tree, self.tree_cfg, self.ctx)
        for k in self.tree.leaf_ids:
            for t in range(self.aug.n_levels):
                lp += self.density(k, t)[0]
        return lp


def prior_level_params(prior: LevelPrior, phi_prior: GammaMixture, m, rng) -> LevelParams:
    phi = phi_prior.sample(rng, m)
    s2 = prior.chi / rng.gamma(prior.lam)
    beta = rng.multivariate_normal(prior.b, s2 * prior.B)
    gamma = None if prior.g is None else rng.multivariate_normal(prior.g, s2 * prior.G)
    return LevelParams(phi, s2, beta, gamma)


def forward_simulate(aug: AugmentedDesign, params: dict, model: ModelSpec, rng) -> np.ndarray:
    """Values on every complete set drawn from the model given the parameters."""
    V = np.full_like(aug.values, np.nan)
    P = aug.points
    for k in aug.leaf_ids:
        for t in range(aug.n_levels):
            idx = aug.idx(k, t)
            if idx.size == 0:
                continue
            pt = params[k][t]
            X = P[idx]
            mean = model.basis.H(t, X) @ pt.beta
            if t:
                mean = mean + scale_discrepancy(model, t - 1, X, pt.gamma) * V[t - 1, idx]
            c = cholesky(pt.sigma2 * corr_matrix(X, None, pt.phi, model.nugget))
            V[t, idx] = mean + c @ rng.standard_normal(len(idx))
    return V


# -- blocks ------------------------------------------------------------------


def update_missing(state: McmcState, rng) -> McmcState:
    """Draw the missing outputs of every (leaf, level), lowest level first."""
    aug = state.aug
    for t in range(aug.n_levels - 1):
        for k in state.tree.leaf_ids:
            Z = aug.idx(k, t, "missing")
            if Z.size == 0:
                continue
            mean, cov = missing_conditional(aug, k, t, state.params, state.model)
            c = cholesky(cov, f"missing-data covariance leaf {k} level {t + 1}")
            aug.values[t, Z] = mean + c @ rng.standard_normal(len(Z))
            state.invalidate(leaves={k}, levels={t, t + 1})
    return state


def update_params(state: McmcState, cfg: McmcConfig, rng, counts=None) -> McmcState:
    """Random-walk step on each ``phi`` then exact draws of ``s2, gamma, beta``."""
    prior = state.model.prior.phi
    for k in state.tree.leaf_ids:
        for t in range(state.aug.n_levels):
            lp = state.params[k][t]
            cur, bundle = state.density(k, t)
            prop = lp.phi * np.exp(cfg.phi_step * rng.standard_normal(len(lp.phi)))
            new, nb = state.evaluate(k, t, prop)
            log_a = new - cur + float(np.sum(np.log(prop / lp.phi)))
            ok = math.isfinite(new) and math.log(rng.uniform()) < log_a
            if counts is not None:
                counts["phi"][0] += 1
                counts["phi"][1] += int(ok)
            if ok:
                lp.phi = prop
                bundle = nb
                state.cache[(k, t)] = (new, nb)
            if bundle is None:
                raise NumericalSingularityError(f"leaf {k} level {t + 1}: singular system at current phi")
            s2, gamma, beta = ConjugateConditionals(bundle).sample(rng, draw_beta=cfg.sample_beta)
            lp.sigma2 = s2
            if gamma is not None:
                lp.gamma = gamma
            if beta is not None:
                lp.beta = beta
    return state


def _leaf_index(state, leaf_of, leaf, level):
    return np.flatnonzero(state.aug.complete[level] & (leaf_of == leaf))


def _densities(state, leaf_of, leaf, phis):
    """Per-level densities and bundles of a (possibly proposed) leaf."""
    out = []
    for t, phi in enumerate(phis):
        out.append(state.evaluate(leaf, t, phi, _leaf_index(state, leaf_of, leaf, t)))
    return out


def grow_log_ratio(state, prop, phis_children, new_leaf_of, new_phi_side):
    """Log acceptance ratio of a grow proposal and the densities it evaluated.

    ``phis_children[c][t]`` is the ``phi`` of child ``c`` at level ``t``; the
    child ``1 - new_phi_side`` inherits the parent's values and child
    ``new_phi_side`` carries the fresh draws from the dimension-matching
    proposal (the ``phi`` prior).
    """
    S = state.aug.n_levels
    q = state.model.prior.phi
    lp_new = log_tree_prior(prop.tree, state.tree_cfg, state.ctx)
    lp_old = log_tree_prior(state.tree, state.tree_cfg, state.ctx)
    dens = [_densities(state, new_leaf_of, prop.child_ids[c], phis_children[c]) for c in (0, 1)]
    lr = lp_new - lp_old - prop.log_rule + math.log(prop.n_growable) - math.log(prop.n_prunable_new)
    for t in range(S):
        m0 = state.density(prop.parent_id, t)[0]
        lr += dens[0][t][0] + dens[1][t][0] - m0 - q.logpdf(phis_children[new_phi_side][t])
    return lr, dens


def prune_log_ratio(state, prop, kept_side, new_leaf_of):
    """Log acceptance ratio of a prune proposal; the merged leaf keeps ``kept_side``'s ``phi``."""
    S = state.aug.n_levels
    q = state.model.prior.phi
    kept, dropped = prop.child_ids[kept_side], prop.child_ids[1 - kept_side]
    phis = [state.params[kept][t].phi for t in range(S)]
    lp_new = log_tree_prior(prop.tree, state.tree_cfg, state.ctx)
    lp_old = log_tree_prior(state.tree, state.tree_cfg, state.ctx)
    dens = _densities(state, new_leaf_of, prop.merged_id, phis)
    lr = lp_new - lp_old + prop.log_rule + math.log(prop.n_prunable) - math.log(prop.n_growable_new)
    for t in range(S):
        m1 = state.density(prop.child_ids[0], t)[0]
        m2 = state.density(prop.child_ids[1], t)[0]
        lr += dens[t][0] + q.logpdf(state.params[dropped][t].phi) - m1 - m2
    return lr, dens


def _install(state, tree, leaf_of, new_params, new_dens, rng):
    """Adopt ``tree`` and redraw ``s2, gamma, beta`` of the leaves in ``new_params``."""
    removed = set(state.params) - set(tree.leaf_ids)
    for k in removed:
        del state.params[k]
    state.invalidate(leaves=removed | set(new_params))
    state.tree = tree
    state.aug.set_leaves(leaf_of)
    for k, phis in new_params.items():
        levels = []
        for t, phi in enumerate(phis):
            d, b = new_dens[k][t]
            state.cache[(k, t)] = (d, b)
            s2, gamma, beta = ConjugateConditionals(b).sample(rng)
            levels.append(LevelParams(np.array(phi, dtype=float), s2, beta, gamma))
        state.params[k] = levels


def update_tree_phi(state: McmcState, cfg: McmcConfig, rng, counts=None):
    """One structural move chosen by ``cfg.move_weights``; returns ``(move, accepted)``."""
    w = np.array([cfg.move_weights.get(m, 0.0) for m in MOVES])
    move = MOVES[int(rng.choice(len(MOVES), p=w))]
    S = state.aug.n_levels
    accepted = False
    if move == "grow":
        prop = propose_grow(state.tree, state.tree_cfg, state.ctx, rng)
        if prop is not None:
            side = int(rng.integers(2))
            inherited = [state.params[prop.parent_id][t].phi for t in range(S)]
            fresh = [state.model.prior.phi.sample(rng, len(inherited[0])) for _ in range(S)]
            phis = [None, None]
            phis[side], phis[1 - side] = fresh, inherited
            leaf_of = prop.tree.locate(state.aug.points)
            lr, dens = grow_log_ratio(state, prop, phis, leaf_of, side)
            if _accept(lr, rng):
                _install(state, prop.tree, leaf_of,
                         {prop.child_ids[c]: phis[c] for c in (0, 1)},
                         {prop.child_ids[c]: dens[c] for c in (0, 1)}, rng)
                accepted = True
    elif move == "prune":
        prop = propose_prune(state.tree, state.tree_cfg, state.ctx, rng)
        if prop is not None:
            side = int(rng.integers(2))
            leaf_of = prop.tree.locate(state.aug.points)
            lr, dens = prune_log_ratio(state, prop, side, leaf_of)
            if _accept(lr, rng):
                kept = prop.child_ids[side]
                phis = [state.params[kept][t].phi for t in range(S)]
                _install(state, prop.tree, leaf_of, {prop.merged_id: phis}, {prop.merged_id: dens}, rng)
                accepted = True
    else:
        fn = {"change": propose_change, "swap": propose_swap, "rotate": propose_rotate}[move]
        prop = fn(state.tree, state.tree_cfg, state.ctx, rng)
        if prop is not None:
            lr = (log_tree_prior(prop.tree, state.tree_cfg, state.ctx)
                  - log_tree_prior(state.tree, state.tree_cfg, state.ctx) + prop.log_q_ratio)
            leaf_of = state.aug.leaf_of
            dens = {}
            if prop.affected:
                leaf_of = prop.tree.locate(state.aug.points)
                for k in prop.affected:
                    phis = [state.params[k][t].phi for t in range(S)]
                    dens[k] = _densities(state, leaf_of, k, phis)
                    for t in range(S):
                        lr += dens[k][t][0] - state.density(k, t)[0]
            if _accept(lr, rng):
                new_params = {k: [state.params[k][t].phi for t in range(S)] for k in prop.affected}
                _install(state, prop.tree, leaf_of, new_params, dens, rng)
                accepted = True
    if counts is not None:
        counts[move][0] += 1
        counts[move][1] += int(accepted)
    return move, accepted


def _accept(log_ratio, rng) -> bool:
    if not math.isfinite(log_ratio):
        return False
    return log_ratio >= 0 or math.log(rng.uniform()) < log_ratio


# -- driver ------------------------------------------------------------------


def initial_state(data: FidelityDataset, model: ModelSpec, cfg: McmcConfig, rng) -> McmcState:
    if not cfg.augmentation_enabled and not data.is_nested():
        raise ConfigError("augmentation can only be disabled for hierarchically nested designs")
    if model.n_levels != data.n_levels:
        raise ConfigError(f"model has {model.n_levels} levels, data has {data.n_levels}")
    aug = build_augmentation(data)
    tcfg = cfg.tree_prior
    mp = tcfg.min_points or default_min_points(model, data.dim)
    if len(mp) != data.n_levels:
        raise ConfigError("min_points needs one entry per level")
    if np.any(aug.complete.sum(axis=1) < np.asarray(mp)):
        raise ConfigError(f"root node has fewer complete points than min_points={list(mp)}")
    ctx = SplitContext(aug.points, aug.complete, mp, data.domain)
    tree = PartitionTree.root_only(data.domain)
    params = {0: [prior_level_params(model.prior.levels[t], model.prior.phi, data.dim, rng)
                  for t in range(data.n_levels)]}
    return McmcState(tree, params, aug, model, ctx, tcfg)


@dataclass
class PosteriorTrace:
    """Retained states plus everything needed to rebuild them."""

    data: FidelityDataset
    model: ModelSpec
    config: McmcConfig
    samples: list
    acceptance: dict
    iterations: list
    input_domain: Domain | None = None

    def __len__(self):
        return len(self.samples)

    def template(self) -> AugmentedDesign:
        if not hasattr(self, "_template"):
            self._template = build_augmentation(self.data)
        return self._template

    def state_of(self, j) -> tuple:
        """``(tree, params, aug)`` of retained sample ``j`` with its imputations restored."""
        s = self.samples[j]
        aug = self.template().copy()
        for t, vals in enumerate(s["missing"]):
            aug.values[t, aug.missing[t]] = vals
        aug.set_leaves(s["tree"].locate(aug.points))
        return s["tree"], s["params"], aug

    def acceptance_rates(self):
        return {m: (a / p if p else float("nan")) for m, (p, a) in self.acceptance.items()}

    def mean_leaves(self) -> float:
        return float(np.mean([s["tree"].n_leaves for s in self.samples]))

    # -- persistence --
    def save(self, path):
        path = Path(path)
        header = {
            "type": "header", "format": TRACE_FORMAT, "version": TRACE_VERSION,
            "config": self.config.to_dict(), "model": model_to_dict(self.model),
            "data": self.data.to_dict(), "acceptance": self.acceptance,
            "input_domain": None if self.input_domain is None else self.input_domain.to_list(),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for s in self.samples:
                rec = {
                    "type": "sample", "iter": s["iter"], "tree": s["tree"].to_dict(),
                    "params": {str(k): [p.to_dict() for p in v] for k, v in sorted(s["params"].items())},
                    "missing": [v.tolist() for v in s["missing"]],
                    "missing_mean": [v.tolist() for v in s["missing_mean"]],
                }
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"type": "summary", "n_samples": len(self.samples),
                                 "mean_leaves": self.mean_leaves() if self.samples else None}) + "\n")

    @classmethod
    def load(cls, path) -> "PosteriorTrace":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"trace file not found: {path}")
        with open(path) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        if not lines or lines[0].get("type") != "header" or lines[0].get("format") != TRACE_FORMAT:
            raise ConfigError(f"{path}: not an {TRACE_FORMAT} file")
        h = lines[0]
        if h.get("version") != TRACE_VERSION:
            raise ConfigError(f"{path}: trace version {h.get('version')} unsupported (expected {TRACE_VERSION})")
        data = FidelityDataset.from_dict(h["data"])
        model = model_from_dict(h["model"])
        cfg = McmcConfig(**h["config"])
        samples = []
        for rec in lines[1:]:
            if rec["type"] != "sample":
                continue
            samples.append({
                "iter": rec["iter"],
                "tree": PartitionTree.from_dict(rec["tree"], data.domain),
                "params": {int(k): [LevelParams.from_dict(p) for p in v] for k, v in rec["params"].items()},
                "missing": [np.asarray(v, dtype=float) for v in rec["missing"]],
                "missing_mean": [np.asarray(v, dtype=float) for v in rec["missing_mean"]],
            })
        acc = {k: list(v) for k, v in h["acceptance"].items()}
        dom = h.get("input_domain")
        dom = None if dom is None else Domain(np.asarray(dom, dtype=float))
        return cls(data, model, cfg, samples, acc, [], dom)

    def write_iterations_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "K", "log_target", "move", "accepted"])
            for row in self.iterations:
                w.writerow([row[0], row[1], repr(float(row[2])), row[3], int(row[4])])


def model_to_dict(model: ModelSpec):
    return {
        "mean_degree": list(model.basis.mean_degree),
        "scale_degree": list(model.basis.scale_degree),
        "nugget": model.nugget,
        "phi_prior": {"weights": list(model.prior.phi.weights), "shapes": list(model.prior.phi.shapes),
                      "rates": list(model.prior.phi.rates)},
        "levels": [
            {"b": lp.b.tolist(), "B": lp.B.tolist(), "lam": lp.lam, "chi": lp.chi,
             "g": None if lp.g is None else lp.g.tolist(), "G": None if lp.G is None else lp.G.tolist()}
            for lp in model.prior.levels
        ],
    }


def model_from_dict(d) -> ModelSpec:
    basis = BasisSpec(tuple(d["mean_degree"]), tuple(d["scale_degree"]))
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)
    levels = tuple(LevelPrior(arr(l["b"]), arr(l["B"]), l["lam"], l["chi"], arr(l["g"]), arr(l["G"]))
                   for l in d["levels"])
    pp = d["phi_prior"]
    phi = GammaMixture(tuple(pp["weights"]), tuple(pp["shapes"]), tuple(pp["rates"]))
    return ModelSpec(basis, NIGPrior(levels, phi), d["nugget"])


def missing_means(tree, params, aug, model):
    """Conditional means of the missing outputs, one array per level (mask order)."""
    out = []
    for t in range(aug.n_levels):
        mu = np.full(aug.points.shape[0], np.nan)
        if t < aug.n_levels - 1:
            for k in tree.leaf_ids:
                Z = aug.idx(k, t, "missing")
                if Z.size:
                    mu[Z] = missing_conditional(aug, k, t, params, model)[0]
        out.append(mu[aug.missing[t]])
    return out


def _snapshot(state: McmcState, it: int):
    aug = state.aug
    return {
        "iter": it,
        "tree": state.tree.clone(),
        "params": {k: [p.copy() for p in v] for k, v in state.params.items()},
        "missing": [aug.values[t, aug.missing[t]].copy() for t in range(aug.n_levels)],
        "missing_mean": missing_means(state.tree, state.params, aug, state.model),
    }


def active_blocks(state: McmcState, cfg: McmcConfig):
    blocks = ["params"]
    if cfg.partition_enabled:
        blocks.append("tree")
    if cfg.augmentation_enabled and state.aug.missing.any():
        blocks.append("missing")
    return blocks


def sweep(state: McmcState, cfg: McmcConfig, rng, blocks, counts=None):
    """Apply ``blocks`` once each in a random order; returns the structural move and its outcome."""
    move, acc = "", False
    for b in rng.permutation(blocks):
        if b == "missing":
            update_missing(state, rng)
        elif b == "tree":
            move, acc = update_tree_phi(state, cfg, rng, counts)
        else:
            update_params(state, cfg, rng, counts)
    return move, acc


def run_sampler(data: FidelityDataset, model: ModelSpec, cfg: McmcConfig, progress=None) -> PosteriorTrace:
    """Run one chain; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    state = initial_state(data, model, cfg, rng)
    counts = {m: [0, 0] for m in MOVES + ("phi",)}
    samples, iterations = [], []
    blocks = active_blocks(state, cfg)
    for it in range(cfg.n_iter):
        try:
            move, acc = sweep(state, cfg, rng, blocks, counts)
            iterations.append((it, state.tree.n_leaves, state.log_target(), move, acc))
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                samples.append(_snapshot(state, it))
        except NumericalSingularityError as exc:
            raise NumericalSingularityError(f"iteration {it}: {exc}") from exc
        if progress is not None:
            progress(it, state)
    return PosteriorTrace(data, model, cfg, samples, counts, iterations)
