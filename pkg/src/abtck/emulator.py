"""Posterior-predictive emulation from a sampler trace.

Given a retained state, the outputs at new inputs in leaf ``k`` follow, level
by level, a Student-t process whose mean and covariance only involve the
hatted regression quantities of that leaf.  Predictive draws are generated
recursively: ``y_1`` first, then ``y_t`` given the freshly drawn ``y_{t-1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gpcore import (
    chol_solve,
    corr_matrix,
    design_matrix,
    hat_bundle,
)


@dataclass
class STP:
    """Student-t with ``cov`` the covariance (not the scale) and ``dof`` degrees of freedom.

    ``cov`` is a square matrix, or a vector of marginal variances when only the
    diagonal was formed.
    """

    mean: np.ndarray
    cov: np.ndarray
    dof: float
    prior_only: bool = False

    @property
    def scale(self):
        return self.cov * (self.dof - 2.0) / self.dof

    @property
    def var(self):
        return self.cov if self.cov.ndim == 1 else np.diag(self.cov).copy()

    def sample(self, rng) -> np.ndarray:
        n = len(self.mean)
        w = np.sqrt(self.dof / rng.chisquare(self.dof))
        z = rng.standard_normal(n)
        if self.cov.ndim == 1:
            return self.mean + w * np.sqrt(np.maximum(self.scale, 0.0)) * z
        vals, vecs = np.linalg.eigh(0.5 * (self.scale + self.scale.T))
        return self.mean + w * (vecs @ (np.sqrt(np.maximum(vals, 0.0)) * z))


def stp_conditional(Xq, leaf, level, params, aug, model, yprev_q=None, joint=True) -> STP:
    """Predictive Student-t of ``y_level`` at ``Xq`` inside ``leaf`` for one posterior state.

    ``yprev_q`` are the level ``level - 1`` outputs at ``Xq`` (ignored at level 0).
    A leaf without complete data at this level yields the prior Student-t.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    idx = aug.idx(leaf, level)
    P, V = aug.points, aug.values
    X = P[idx]
    phi = params[leaf][level].phi
    b = hat_bundle(level, X, V[level, idx], V[level - 1, idx] if level else None, phi, model)
    H, W = design_matrix(model, level, Xq, yprev_q)
    Lq = H if W is None else np.hstack([H, W])
    dof = 2.0 * b.prior.lam + b.n
    if b.n:
        r = corr_matrix(Xq, X, phi)
        T = chol_solve(b.chol_R, r.T).T
        mean = Lq @ b.alpha_hat + T @ (b.y - b.L @ b.alpha_hat)
        D = Lq - T @ b.L
    else:
        T = r = np.zeros((len(Xq), 0))
        mean = Lq @ b.alpha_hat
        D = Lq
    if joint:
        Rs = corr_matrix(Xq, None, phi, model.nugget) - T @ r.T + D @ b.A_hat @ D.T
        Rs = 0.5 * (Rs + Rs.T)
    else:
        Rs = 1.0 + model.nugget - np.einsum("ij,ij->i", T, r) + np.einsum("ij,jk,ik->i", D, b.A_hat, D)
    return STP(mean, b.sigma2_hat * Rs, dof, prior_only=b.n == 0)


@dataclass
class PredictiveDraw:
    values: list
    sample: int
    prior_only: list


def recursive_draw(Xq, state, rng, sample_index=-1, model=None, joint=False) -> PredictiveDraw:
    """One draw of every level at ``Xq`` from the posterior state ``(tree, params, aug)``."""
    tree, params, aug = state
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    leaf_q = tree.locate(Xq)
    S = aug.n_levels
    values, flags = [], []
    prev = np.zeros(len(Xq))
    for t in range(S):
        cur = np.empty(len(Xq))
        flag = np.zeros(len(Xq), dtype=bool)
        for k in np.unique(leaf_q):
            sel = np.flatnonzero(leaf_q == k)
            stp = stp_conditional(Xq[sel], int(k), t, params, aug, model, prev[sel], joint=joint)
            cur[sel] = stp.sample(rng)
            flag[sel] = stp.prior_only
        values.append(cur)
        flags.append(flag)
        prev = cur
    return PredictiveDraw(values, sample_index, flags)


def posterior_draws(trace, Xq, rng, n_samples=None, joint=None):
    """Recursive draws from evenly spaced retained samples of ``trace``."""
    N = len(trace)
    if N == 0:
        raise ConfigError("trace holds no retained samples")
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    trace.data.domain.check(Xq, what="query points")
    use = np.arange(N) if n_samples is None or n_samples >= N else np.unique(
        np.linspace(0, N - 1, n_samples).round().astype(int))
    joint = len(Xq) <= 200 if joint is None else joint
    return [recursive_draw(Xq, trace.state_of(j), rng, int(j), trace.model, joint) for j in use]


@dataclass
class PredictiveSummary:
    level: int
    mean: np.ndarray
    var: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_draws: int
    prior_only: np.ndarray


def predictive_summary(draws, level: int, alpha: float = 0.05) -> PredictiveSummary:
    """Pointwise mean, variance and ``1 - alpha`` equal-tail interval of ``y_level``."""
    if not draws:
        raise ConfigError("no predictive draws to summarize")
    if not 0.0 <= alpha < 1.0:
        raise ConfigError("alpha must lie in [0, 1)")
    Y = np.vstack([d.values[level] for d in draws])
    lo, hi = np.quantile(Y, [alpha / 2, 1 - alpha / 2], axis=0)
    flags = np.vstack([d.prior_only[level] for d in draws]).any(axis=0)
    var = Y.var(axis=0, ddof=1) if len(Y) > 1 else np.zeros(Y.shape[1])
    return PredictiveSummary(level, Y.mean(axis=0), var, lo, hi, len(Y), flags)


def rao_blackwell_missing(trace):
    """Per level: missing points, Rao-Blackwell means, plain draw means and draw spread."""
    if len(trace) == 0:
        raise ConfigError("trace holds no retained samples")
    aug = trace.template()
    out = []
    for t in range(aug.n_levels):
        idx = np.flatnonzero(aug.missing[t])
        draws = np.vstack([s["missing"][t] for s in trace.samples]) if idx.size else np.zeros((len(trace), 0))
        mus = np.vstack([s["missing_mean"][t] for s in trace.samples]) if idx.size else np.zeros((len(trace), 0))
        out.append({
            "level": t, "index": idx, "X": aug.points[idx],
            "rb": mus.mean(axis=0), "plain": draws.mean(axis=0),
            "sd": draws.std(axis=0, ddof=1) if len(trace) > 1 else np.zeros(idx.size),
        })
    return out


def scale_discrepancy_field(trace, Xg, link: int = 0) -> np.ndarray:
    """Posterior mean of ``xi_link(x)`` using each leaf's ``gamma_hat`` at the sampled ``phi``."""
    if len(trace) == 0:
        raise ConfigError("trace holds no retained samples")
    Xg = np.atleast_2d(np.asarray(Xg, dtype=float))
    model = trace.model
    level = link + 1
    acc = np.zeros(len(Xg))
    w = model.basis.w(link, Xg)
    for j in range(len(trace)):
        tree, params, aug = trace.state_of(j)
        leaf_g = tree.locate(Xg)
        for k in np.unique(leaf_g):
            idx = aug.idx(int(k), level)
            P, V = aug.points, aug.values
            b = hat_bundle(level, P[idx], V[level, idx], V[level - 1, idx], params[int(k)][level].phi, model)
            sel = leaf_g == k
            acc[sel] += w[sel] @ b.gamma_hat
    return acc / len(trace)


def write_predictions_csv(path, Xq, summaries):
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(Xq.shape[1])] + ["level", "mean", "var", "lo", "hi", "n_draws"])
        for s in summaries:
            for i in range(len(s.mean)):
                w.writerow([repr(float(v)) for v in Xq[i]] + [s.level + 1] +
                           [repr(float(v)) for v in (s.mean[i], s.var[i], s.lo[i], s.hi[i])] + [s.n_draws])
