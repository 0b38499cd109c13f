"""Numerical kernels of the treed co-kriging model.

Every level-``t`` block of a leaf is a Gaussian linear model with correlated
errors::

    y_t(Z) = L_t(Z) a_t + e,   e ~ N(0, s2 R_t(Z, Z | phi))
    L_1 = H_1,   L_t = [H_t, diag(y_{t-1}(Z)) w_{t-1}(Z)],   a_t = [beta_t, gamma_{t-1}]

with a Normal-inverse-gamma prior ``a | s2 ~ N(a0, s2 V0)``, ``s2 ~ IG(lam, chi)``
(shape/scale, density proportional to ``s2**-(lam+1) exp(-chi/s2)``).
All inverses go through Cholesky factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import gammaln, logsumexp

from .errors import NumericalSingularityError

NUGGET = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def corr_matrix(X, Xp, phi, nugget: float = NUGGET) -> np.ndarray:
    """Separable squared-exponential correlation.

    ``R[i, j] = exp(-0.5 * sum_k phi_k (x_ik - x'_jk)**2)``.  Passing ``Xp=None``
    (or the same array object as ``X``) builds the self-correlation and adds
    ``nugget`` to its diagonal.
    """
    same = Xp is None or Xp is X
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xp = X if same else np.atleast_2d(np.asarray(Xp, dtype=float))
    if X.shape[0] == 0 or Xp.shape[0] == 0:
        return np.zeros((X.shape[0], Xp.shape[0]))
    s = np.sqrt(np.asarray(phi, dtype=float))
    R = np.exp(-0.5 * cdist(X * s, Xp * s, "sqeuclidean"))
    if same:
        R[np.diag_indices_from(R)] += nugget
    return R


def cholesky(A, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter up to three times (x10)."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return A.copy()
    scale = float(np.mean(np.abs(np.diag(A)))) or 1.0
    for k in range(4):
        M = A if k == 0 else A + (NUGGET * 10.0**k * scale) * np.eye(len(A))
        try:
            return linalg.cholesky(M, lower=True)
        except (linalg.LinAlgError, ValueError):
            continue
    raise NumericalSingularityError(f"{what} is singular after jitter escalation")


def chol_solve(c, b):
    if c.shape[0] == 0:
        return np.zeros_like(np.asarray(b, dtype=float))
    return linalg.cho_solve((c, True), b)


def chol_logdet(c) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c)))) if c.shape[0] else 0.0


def polynomial_basis(X, degree: int) -> np.ndarray:
    """Columns ``1, x_j, x_j**2, ..., x_j**degree`` (no interactions)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [np.ones(len(X))]
    for p in range(1, degree + 1):
        cols.extend(X[:, j] ** p for j in range(X.shape[1]))
    return np.column_stack(cols)


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial degrees of the mean basis per level and scale basis per link.

    Link ``t`` (0-based) connects level ``t`` to ``t + 1``.
    """

    mean_degree: tuple
    scale_degree: tuple

    @classmethod
    def constant(cls, n_levels: int) -> "BasisSpec":
        return cls((0,) * n_levels, (0,) * (n_levels - 1))

    def H(self, level, X):
        return polynomial_basis(X, self.mean_degree[level])

    def w(self, link, X):
        return polynomial_basis(X, self.scale_degree[link])

    def p(self, level, m):
        return 1 + m * self.mean_degree[level]

    def q(self, link, m):
        return 1 + m * self.scale_degree[link]


@dataclass(frozen=True)
class GammaMixture:
    """Independent per-coordinate prior ``sum_c w_c Gamma(shape_c, rate_c)``."""

    weights: tuple = (0.5, 0.5)
    shapes: tuple = (1.0, 10.0)
    rates: tuple = (20.0, 10.0)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def logpdf(self, phi) -> float:
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        if np.any(phi <= 0):
            return -math.inf
        a = np.asarray(self.shapes)[:, None]
        b = np.asarray(self.rates)[:, None]
        comp = a * np.log(b) + (a - 1) * np.log(phi) - b * phi - gammaln(a)
        return float(np.sum(logsumexp(comp, axis=0, b=np.asarray(self.weights)[:, None])))

    def sample(self, rng, m: int) -> np.ndarray:
        c = rng.choice(len(self.weights), size=m, p=self.weights)
        return rng.gamma(np.asarray(self.shapes)[c], 1.0 / np.asarray(self.rates)[c])


@dataclass(frozen=True)
class LevelPrior:
    b: np.ndarray
    B: np.ndarray
    lam: float
    chi: float
    g: np.ndarray | None = None
    G: np.ndarray | None = None

    def __post_init__(self):
        if self.lam <= 0 or self.chi <= 0:
            raise ValueError("inverse-gamma shape and scale must be positive")
        for M in (self.B, self.G):
            if M is not None and (not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0):
                raise ValueError("prior covariance scales must be symmetric positive definite")

    @property
    def a0(self):
        return self.b if self.g is None else np.concatenate([self.b, self.g])

    @property
    def V0(self):
        return self.B if self.G is None else linalg.block_diag(self.B, self.G)


@dataclass(frozen=True)
class NIGPrior:
    levels: tuple
    phi: GammaMixture = GammaMixture()

    @classmethod
    def build(cls, basis: BasisSpec, m: int, b=0.0, B=10.0, g=0.0, G=10.0, lam=2.0, chi=2.0,
              phi: GammaMixture | None = None) -> "NIGPrior":
        """Scalar (or per-level list) hyperparameters broadcast to basis sizes."""
        S = len(basis.mean_degree)

        def at(v, t):
            return v[t] if isinstance(v, (list, tuple)) else v

        levels = []
        for t in range(S):
            p = basis.p(t, m)
            lp = dict(b=np.full(p, float(at(b, t))), B=float(at(B, t)) * np.eye(p),
                      lam=float(at(lam, t)), chi=float(at(chi, t)))
            if t > 0:
                q = basis.q(t - 1, m)
                lp.update(g=np.full(q, float(at(g, t - 1))), G=float(at(G, t - 1)) * np.eye(q))
            levels.append(LevelPrior(**lp))
        return cls(tuple(levels), phi or GammaMixture())


@dataclass(frozen=True)
class ModelSpec:
    basis: BasisSpec
    prior: NIGPrior
    nugget: float = NUGGET

    @property
    def n_levels(self):
        return len(self.basis.mean_degree)


@dataclass
class LevelParams:
    phi: np.ndarray
    sigma2: float
    beta: np.ndarray
    gamma: np.ndarray | None = None

    def copy(self):
        return LevelParams(self.phi.copy(), self.sigma2, self.beta.copy(),
                           None if self.gamma is None else self.gamma.copy())

    def to_dict(self):
        return {"phi": self.phi.tolist(), "sigma2": self.sigma2, "beta": self.beta.tolist(),
                "gamma": None if self.gamma is None else self.gamma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["phi"], dtype=float), float(d["sigma2"]), np.asarray(d["beta"], dtype=float),
                   None if d["gamma"] is None else np.asarray(d["gamma"], dtype=float))


def scale_discrepancy(model: ModelSpec, link: int, X, gamma) -> np.ndarray:
    """``xi_link(X | gamma) = w_link(X) @ gamma``."""
    return model.basis.w(link, X) @ gamma


def design_matrix(model: ModelSpec, level: int, X, y_prev):
    """``(H, W~)`` with ``W~ = diag(y_prev) w_{level-1}(X)``; ``W~`` is None at level 0."""
    H = model.basis.H(level, X)
    if level == 0:
        return H, None
    return H, np.asarray(y_prev, dtype=float)[:, None] * model.basis.w(level - 1, X)


@dataclass
class HatBundle:
    """Conjugate posterior quantities of one (leaf, level) block at fixed ``phi``."""

    level: int
    n: int
    H: np.ndarray
    Wt: np.ndarray | None
    L: np.ndarray
    y: np.ndarray
    chol_R: np.ndarray
    prior: LevelPrior
    A_hat: np.ndarray
    alpha_hat: np.ndarray
    Q: float
    logdet_R: float
    logdet_A: float
    logdet_V0: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def lam_hat(self) -> float:
        return self.prior.lam + 0.5 * self.n

    @property
    def sse(self) -> float:
        return 2.0 * self.prior.chi + self.Q

    @property
    def chi_hat(self) -> float:
        """Inverse-gamma scale of the ``s2`` conditional."""
        return 0.5 * self.sse

    @property
    def sigma2_hat(self) -> float:
        return self.sse / (2.0 * self.prior.lam + self.n - 2.0)

    def Ri(self, M):
        return chol_solve(self.chol_R, M)

    @property
    def B_hat(self):
        if "B_hat" not in self._cache:
            Binv = np.linalg.inv(self.prior.B)
            self._cache["B_hat"] = np.linalg.inv(self.H.T @ self.Ri(self.H) + Binv)
        return self._cache["B_hat"]

    @property
    def C_hat(self):
        """``(R + H B H^T)^{-1}``, the precision left after integrating ``beta``."""
        if "C_hat" not in self._cache:
            RiH = self.Ri(self.H)
            Ri = self.Ri(np.eye(self.n))
            self._cache["C_hat"] = Ri - RiH @ self.B_hat @ RiH.T
        return self._cache["C_hat"]

    @property
    def G_hat(self):
        if self.Wt is None:
            return None
        if "G_hat" not in self._cache:
            Ginv = np.linalg.inv(self.prior.G)
            self._cache["G_hat"] = np.linalg.inv(self.Wt.T @ self.C_hat @ self.Wt + Ginv)
        return self._cache["G_hat"]

    @property
    def gamma_hat(self):
        if self.Wt is None:
            return None
        Ginv = np.linalg.inv(self.prior.G)
        r = self.y - self.H @ self.prior.b
        return self.G_hat @ (Ginv @ self.prior.g + self.Wt.T @ self.C_hat @ r)

    def beta_hat(self, gamma=None):
        Binv = np.linalg.inv(self.prior.B)
        r = self.y if self.Wt is None else self.y - self.Wt @ gamma
        return self.B_hat @ (self.H.T @ self.Ri(r) + Binv @ self.prior.b)


def hat_bundle(level: int, X, y, y_prev, phi, model: ModelSpec) -> HatBundle:
    """Posterior pieces of the NIG regression at ``level`` on the point set ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    if n == 0:
        X = X.reshape(0, len(np.atleast_1d(phi)))
    lp = model.prior.levels[level]
    H, Wt = design_matrix(model, level, X, y_prev)
    L = H if Wt is None else np.hstack([H, Wt])
    cR = cholesky(corr_matrix(X, None, phi, model.nugget), f"R at level {level + 1}")
    V0 = lp.V0
    V0inv = np.linalg.inv(V0)
    a0 = lp.a0
    RiL = chol_solve(cR, L)
    M = L.T @ RiL + V0inv
    cM = cholesky(M, f"A-hat at level {level + 1}")
    alpha = chol_solve(cM, L.T @ chol_solve(cR, y) + V0inv @ a0)
    A_hat = chol_solve(cM, np.eye(len(a0)))
    resid = y - L @ alpha
    da = alpha - a0
    Q = float(resid @ chol_solve(cR, resid) + da @ V0inv @ da)
    return HatBundle(level, n, H, Wt, L, y, cR, lp, A_hat, alpha, max(Q, 0.0),
                     chol_logdet(cR), -chol_logdet(cM), float(np.linalg.slogdet(V0)[1]))


def log_evidence(bundle: HatBundle) -> float:
    """``log p(y | phi)`` with ``a`` and ``s2`` integrated out."""
    lp, n = bundle.prior, bundle.n
    return (0.5 * bundle.logdet_A - 0.5 * bundle.logdet_V0 - 0.5 * bundle.logdet_R
            + lp.lam * math.log(lp.chi) - (lp.lam + 0.5 * n) * math.log(bundle.chi_hat)
            + gammaln(lp.lam + 0.5 * n) - gammaln(lp.lam) - 0.5 * n * LOG_2PI)


def marginal_level_density(level: int, X, y, y_prev, phi, model: ModelSpec) -> float:
    """``log pi(y_t, phi | y_{t-1})``: collapsed evidence plus the ``phi`` prior."""
    lprior = model.prior.phi.logpdf(phi)
    if not math.isfinite(lprior):
        return -math.inf
    b = hat_bundle(level, X, y, y_prev, phi, model)
    if b.sse <= 0:
        raise NumericalSingularityError(f"non-positive SSE at level {level + 1}")
    return lprior + log_evidence(b)


@dataclass
class ConjugateConditionals:
    """``s2 ~ IG(lam_hat, chi_hat)``, ``gamma | s2``, ``beta | gamma, s2``."""

    bundle: HatBundle

    @property
    def shape(self):
        return self.bundle.lam_hat

    @property
    def scale(self):
        return self.bundle.chi_hat

    def sample(self, rng, draw_beta: bool = True):
        b = self.bundle
        s2 = self.scale / rng.gamma(self.shape)
        gamma = None
        if b.Wt is not None:
            gamma = rng.multivariate_normal(b.gamma_hat, s2 * b.G_hat, method="cholesky")
        beta = None
        if draw_beta:
            beta = rng.multivariate_normal(b.beta_hat(gamma), s2 * b.B_hat, method="cholesky")
        return s2, gamma, beta


def gibbs_conditionals(level, X, y, y_prev, phi, model) -> ConjugateConditionals:
    return ConjugateConditionals(hat_bundle(level, X, y, y_prev, phi, model))


def augmented_loglik(aug, params: dict, model: ModelSpec) -> float:
    """Sum over leaves and levels of the Gaussian block log-densities."""
    total = 0.0
    P, V = aug.points, aug.values
    for k in aug.leaf_ids:
        for t in range(aug.n_levels):
            idx = aug.idx(k, t)
            if idx.size == 0:
                continue
            pt = params[k][t]
            X = P[idx]
            mean = model.basis.H(t, X) @ pt.beta
            if t > 0:
                mean = mean + scale_discrepancy(model, t - 1, X, pt.gamma) * V[t - 1, idx]
            c = cholesky(pt.sigma2 * corr_matrix(X, None, pt.phi, model.nugget), f"leaf {k} level {t + 1}")
            r = linalg.solve_triangular(c, V[t, idx] - mean, lower=True)
            total += -0.5 * float(r @ r) - 0.5 * chol_logdet(c) - 0.5 * len(idx) * LOG_2PI
    return total


def _krige(level, Xz, Xj, r_j, phi, model):
    """Moments of a level residual field at ``Xz`` given its values at ``Xj``.

    ``beta`` is integrated against its ``N(b, s2 B)`` prior; returns the mean
    and the covariance in units of ``s2``.
    """
    lp = model.prior.levels[level]
    Hz = model.basis.H(level, Xz)
    Rzz = corr_matrix(Xz, None, phi, model.nugget)
    if len(Xj) == 0:
        return Hz @ lp.b, Rzz + Hz @ lp.B @ Hz.T
    Hj = model.basis.H(level, Xj)
    cR = cholesky(corr_matrix(Xj, None, phi, model.nugget), f"R(J, J) at level {level + 1}")
    Rzj = corr_matrix(Xz, Xj, phi)
    Binv = np.linalg.inv(lp.B)
    B_hat = np.linalg.inv(Hj.T @ chol_solve(cR, Hj) + Binv)
    beta_hat = B_hat @ (Hj.T @ chol_solve(cR, r_j) + Binv @ lp.b)
    T = chol_solve(cR, Rzj.T).T
    D = Hz - T @ Hj
    mean = Hz @ beta_hat + T @ (r_j - Hj @ beta_hat)
    cov = Rzz - T @ Rzj.T + D @ B_hat @ D.T
    return mean, 0.5 * (cov + cov.T)


def lower_interpolant(level, Xz, Xj, y_j, yprev_z, yprev_j, gamma_prev, phi, model):
    """``(mu_hat_{(t-1)->t}, R_hat_t)`` for targets ``Xz`` given level data at ``Xj``."""
    Xz, Xj = np.atleast_2d(Xz), np.atleast_2d(Xj)
    if level == 0:
        off_z, off_j = 0.0, 0.0
    else:
        off_z = scale_discrepancy(model, level - 1, Xz, gamma_prev) * yprev_z
        off_j = scale_discrepancy(model, level - 1, Xj, gamma_prev) * yprev_j if len(Xj) else 0.0
    r_j = np.asarray(y_j, dtype=float) - off_j
    mean, cov = _krige(level, Xz, Xj.reshape(-1, Xz.shape[1]), r_j, phi, model)
    return off_z + mean, cov


def upper_interpolant(level, Xz, Xj, yup_z, yup_j, y_j, gamma, phi_up, model):
    """``(mu_hat_{(t+1)->t}, R_hat_{t+1})``: what level ``level + 1`` says about ``xi * y_t``."""
    Xz, Xj = np.atleast_2d(Xz), np.atleast_2d(Xj)
    up = level + 1
    r_j = np.asarray(yup_j, dtype=float)
    if len(Xj):
        r_j = r_j - scale_discrepancy(model, level, Xj, gamma) * y_j
    mean, cov = _krige(up, Xz, Xj.reshape(-1, Xz.shape[1]), r_j, phi_up, model)
    return np.asarray(yup_z, dtype=float) - mean, cov


def interp_moments(aug, leaf, level, Z, J_lower, J_upper, params, model):
    """Interpolants at point indices ``Z``; upper pieces are None at the top level."""
    P, V = aug.points, aug.values
    pt = params[leaf][level]
    zero_z = np.zeros(len(Z))
    mu_l, R_l = lower_interpolant(
        level, P[Z], P[J_lower], V[level, J_lower],
        V[level - 1, Z] if level else zero_z, V[level - 1, J_lower] if level else np.zeros(len(J_lower)),
        pt.gamma, pt.phi, model,
    )
    out = {"R_hat": R_l, "mu_lower": mu_l, "R_hat_upper": None, "mu_upper": None}
    if level + 1 < aug.n_levels:
        pu = params[leaf][level + 1]
        mu_u, R_u = upper_interpolant(
            level, P[Z], P[J_upper], V[level + 1, Z], V[level + 1, J_upper], V[level, J_upper],
            pu.gamma, pu.phi, model,
        )
        out.update(R_hat_upper=R_u, mu_upper=mu_u)
    return out


def missing_conditional(aug, leaf: int, level: int, params: dict, model: ModelSpec):
    """Mean and covariance of the missing outputs of ``(leaf, level)`` given the rest.

    The level-``t`` interpolant acts as a Gaussian prior ``N(mu_l, s2_t R_l)``
    and the level-``t+1`` interpolant as an observation of ``Xi * y`` with
    covariance ``s2_{t+1} R_u``; combining them in gain form avoids inverting
    the (often near-singular) ``R_l``.
    """
    Z = aug.idx(leaf, level, "missing")
    if Z.size == 0 or level + 1 >= aug.n_levels:
        raise ValueError(f"leaf {leaf} level {level + 1} has no missing points")
    J_lower = aug.idx(leaf, level, "observed")
    J_upper = np.setdiff1d(aug.idx(leaf, level + 1), Z)
    m = interp_moments(aug, leaf, level, Z, J_lower, J_upper, params, model)
    pt, pu = params[leaf][level], params[leaf][level + 1]
    A = pt.sigma2 * m["R_hat"]
    C = pu.sigma2 * m["R_hat_upper"]
    xi = scale_discrepancy(model, level, aug.points[Z], pu.gamma)
    XA = xi[:, None] * A
    cS = cholesky(XA * xi[None, :] + C, f"missing-data system leaf {leaf} level {level + 1}")
    mean = m["mu_lower"] + XA.T @ chol_solve(cS, m["mu_upper"] - xi * m["mu_lower"])
    cov = A - XA.T @ chol_solve(cS, XA)
    return mean, 0.5 * (cov + cov.T)
