import math

import numpy as np
import pytest
from scipy import integrate, stats

from abtck.design import Domain, FidelityDataset, FidelityLevel, lhs_sample
from abtck.errors import ConfigError
from abtck.gpcore import BasisSpec, ModelSpec, NIGPrior, corr_matrix, marginal_level_density
from abtck.sampler import (
    McmcConfig,
    PosteriorTrace,
    _install,
    active_blocks,
    default_min_points,
    forward_simulate,
    grow_log_ratio,
    initial_state,
    missing_means,
    prior_level_params,
    prune_log_ratio,
    run_sampler,
    sweep,
    update_missing,
)
from abtck.treepart import Node, PartitionTree, SplitContext, TreePriorConfig, log_tree_prior, propose_grow, propose_prune

BOX = Domain(np.array([[0.0, 1.0], [0.0, 1.0]]))
LINE = Domain(np.array([[0.0, 1.0]]))


def batch_mcse(x, n_batches=50):
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


def two_level_data(n1=25, n2=10, seed=0):
    X1, X2 = lhs_sample(n1, BOX, seed), lhs_sample(n2, BOX, seed + 100)
    f1 = lambda X: np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    f2 = lambda X: 1.5 * f1(X) + 0.3 * X[:, 0]
    return FidelityDataset([FidelityLevel(X1, f1(X1)), FidelityLevel(X2, f2(X2))], BOX)


def two_level_model(m=2, **kw):
    basis = BasisSpec.constant(2)
    return ModelSpec(basis, NIGPrior.build(basis, m, **kw))


class TestConfig:
    def test_zero_length_chain(self):
        with pytest.raises(ConfigError):
            McmcConfig(n_iter=0, burn_in=0)

    def test_burn_in_must_leave_samples(self):
        with pytest.raises(ConfigError):
            McmcConfig(n_iter=10, burn_in=10)

    def test_move_weights_validated(self):
        with pytest.raises(ConfigError):
            McmcConfig(move_weights={"grow": 0.5, "prune": 0.6})
        with pytest.raises(ConfigError):
            McmcConfig(move_weights={"jump": 1.0})

    def test_round_trip(self):
        cfg = McmcConfig(n_iter=50, burn_in=5, thin=3, tree_prior=TreePriorConfig(0.4, 1.5, (3, 4)))
        assert McmcConfig(**cfg.to_dict()) == cfg
        assert cfg.n_retained == len(range(5, 50, 3))

    def test_default_min_points(self):
        model = two_level_model()
        assert default_min_points(model, 2) == (3, 4)

    def test_btck_requires_nested(self):
        with pytest.raises(ConfigError, match="nested"):
            run_sampler(two_level_data(), two_level_model(), McmcConfig(10, 0, augmentation_enabled=False))

    def test_level_mismatch(self):
        basis = BasisSpec.constant(1)
        model = ModelSpec(basis, NIGPrior.build(basis, 2))
        with pytest.raises(ConfigError, match="levels"):
            run_sampler(two_level_data(), model, McmcConfig(10, 0))


class TestRun:
    def test_reproducible_trace_file(self, tmp_path):
        data, model = two_level_data(), two_level_model()
        cfg = McmcConfig(n_iter=60, burn_in=10, seed=5)
        for name in ("a", "b"):
            run_sampler(data, model, cfg).save(tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_trace_round_trip(self, tmp_path):
        tr = run_sampler(two_level_data(), two_level_model(), McmcConfig(n_iter=40, burn_in=10, thin=2, seed=1))
        tr.save(tmp_path / "t.jsonl")
        back = PosteriorTrace.load(tmp_path / "t.jsonl")
        assert len(back) == len(tr) == 15
        for j in (0, len(tr) - 1):
            t0, p0, a0 = tr.state_of(j)
            t1, p1, a1 = back.state_of(j)
            assert t0.key() == t1.key()
            np.testing.assert_array_equal(a0.values[a0.complete], a1.values[a1.complete])
            for k in p0:
                for x, y in zip(p0[k], p1[k]):
                    np.testing.assert_array_equal(x.phi, y.phi)
                    assert x.sigma2 == y.sigma2

    def test_version_mismatch(self, tmp_path):
        tr = run_sampler(two_level_data(), two_level_model(), McmcConfig(n_iter=5, burn_in=0))
        tr.save(tmp_path / "t.jsonl")
        text = (tmp_path / "t.jsonl").read_text().replace('"version": 1', '"version": 99', 1)
        (tmp_path / "t.jsonl").write_text(text)
        with pytest.raises(ConfigError, match="version"):
            PosteriorTrace.load(tmp_path / "t.jsonl")

    def test_abck_keeps_single_leaf(self):
        tr = run_sampler(two_level_data(), two_level_model(), McmcConfig(n_iter=40, burn_in=0, partition_enabled=False))
        assert tr.mean_leaves() == 1.0
        assert sum(tr.acceptance[m][0] for m in ("grow", "prune", "change")) == 0

    def test_btck_on_nested_design_leaves_data_alone(self):
        X = lhs_sample(20, BOX, 3)
        ds = FidelityDataset([FidelityLevel(X, np.sin(4 * X[:, 0])), FidelityLevel(X[:6], np.cos(X[:6, 1]))], BOX)
        cfg = McmcConfig(n_iter=30, burn_in=0, augmentation_enabled=False, seed=2)
        tr = run_sampler(ds, two_level_model(), cfg)
        assert all(len(v) == 0 for v in tr.samples[-1]["missing"])

    def test_acceptance_counters_conserve_leaves(self):
        tr = run_sampler(two_level_data(40, 12), two_level_model(), McmcConfig(n_iter=300, burn_in=0, seed=3))
        g, p = tr.acceptance["grow"][1], tr.acceptance["prune"][1]
        assert g - p == tr.iterations[-1][1] - 1

    def test_block_order_toggles(self):
        data, model = two_level_data(), two_level_model()
        state = initial_state(data, model, McmcConfig(n_iter=2, burn_in=0), np.random.default_rng(0))
        assert active_blocks(state, McmcConfig(n_iter=2, burn_in=0)) == ["params", "tree", "missing"]
        assert active_blocks(state, McmcConfig(n_iter=2, burn_in=0, partition_enabled=False)) == ["params", "missing"]


def first(make, ok=lambda v: True, tries=2000):
    for _ in range(tries):
        v = make()
        if v is not None and ok(v):
            return v
    raise AssertionError("no admissible proposal drawn")


def grown_state(seed):
    data, model = two_level_data(60, 30, seed), two_level_model()
    cfg = McmcConfig(n_iter=2, burn_in=0, seed=seed)
    rng = np.random.default_rng(seed)
    state = initial_state(data, model, cfg, rng)
    # one accepted-by-fiat grow so the reciprocity check runs on a non-root tree
    prop = first(lambda: propose_grow(state.tree, state.tree_cfg, state.ctx, rng))
    phi = state.params[0]
    phis = [[p.phi for p in phi], [model.prior.phi.sample(rng, 2) for _ in range(2)]]
    leaf_of = prop.tree.locate(state.aug.points)
    _, dens = grow_log_ratio(state, prop, phis, leaf_of, 1)
    _install(state, prop.tree, leaf_of, {prop.child_ids[c]: phis[c] for c in (0, 1)},
             {prop.child_ids[c]: dens[c] for c in (0, 1)}, rng)
    return state, rng


def matched_grow_prune(seed):
    """Log acceptance ratios of a grow and of the prune that exactly undoes it, plus both proposals."""
    state, rng = grown_state(seed)
    S = 2
    g = first(lambda: propose_grow(state.tree, state.tree_cfg, state.ctx, rng))
    side = int(rng.integers(2))
    fresh = [state.model.prior.phi.sample(rng, 2) for _ in range(S)]
    inherited = [state.params[g.parent_id][t].phi for t in range(S)]
    phis = [None, None]
    phis[side], phis[1 - side] = fresh, inherited
    leaf_of = g.tree.locate(state.aug.points)
    lr_grow, dens = grow_log_ratio(state, g, phis, leaf_of, side)
    _install(state, g.tree, leaf_of, {g.child_ids[c]: phis[c] for c in (0, 1)},
             {g.child_ids[c]: dens[c] for c in (0, 1)}, rng)
    p = first(lambda: propose_prune(state.tree, state.tree_cfg, state.ctx, rng), lambda q: q.path == g.path)
    lr_prune, _ = prune_log_ratio(state, p, 1 - side, p.tree.locate(state.aug.points))
    return lr_grow, lr_prune, g, p


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_matched_moves_share_counts(seed):
    lr_grow, lr_prune, g, p = matched_grow_prune(seed)
    assert math.isfinite(lr_grow) and math.isfinite(lr_prune)
    assert p.n_growable_new == g.n_growable and p.n_prunable == g.n_prunable_new


def exact_tree_posterior(x, y, model, tcfg):
    """Collapsed posterior over the trees of a 1-D, single-level problem by quadrature over ``log phi``."""
    X = x[:, None]
    ctx = SplitContext(X, np.ones((1, len(x)), dtype=bool), tcfg.min_points, LINE)

    def log_leaf(mask):
        f = lambda u: marginal_level_density(0, X[mask], y[mask], None, np.array([math.exp(u)]), model) + u
        us = np.linspace(-15, 8, 400)
        vals = np.array([f(u) for u in us])
        top = vals.max()
        val, _ = integrate.quad(lambda u: math.exp(f(u) - top), -15, 8, points=[us[vals.argmax()]],
                                limit=200, epsabs=0, epsrel=1e-9)
        return top + math.log(val)

    out = {}
    root = PartitionTree.root_only(LINE)
    out[root.key()] = log_tree_prior(root, tcfg, ctx) + log_leaf(np.ones(len(x), dtype=bool))
    for s in ctx.candidates(LINE.lower, LINE.upper)[0]:
        t = PartitionTree(Node(0, float(s), Node(leaf_id=1), Node(leaf_id=2)), LINE)
        if ctx.tree_ok(t, tcfg):
            out[t.key()] = log_tree_prior(t, tcfg, ctx) + log_leaf(x < s) + log_leaf(x >= s)
    v = np.array(list(out.values()))
    p = np.exp(v - v.max())
    return dict(zip(out, p / p.sum()))


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_exact_enumeration_has_five_trees():
    x = (np.arange(11) + 0.5) / 11
    basis = BasisSpec.constant(1)
    model = ModelSpec(basis, NIGPrior.build(basis, 1, lam=2.0, chi=2.0, B=10.0))
    exact = exact_tree_posterior(x, np.sin(3 * x) + 0.08 * np.abs(x - 0.47), model, TreePriorConfig(0.5, 2.0, (4,)))
    assert len(exact) == 5
    assert sum(exact.values()) == pytest.approx(1.0)
    assert sorted(exact.values())[-2] > 0.2


def stationary_tree_frequencies(n_iter=20000, seed=1):
    """Sampler tree frequencies against exact enumeration on a 1-D problem with five admissible trees.

    Returns ``(key, exact, observed, mcse)`` tuples.
    """
    x = (np.arange(11) + 0.5) / 11
    y = np.sin(3 * x) + 0.08 * np.abs(x - 0.47)
    basis = BasisSpec.constant(1)
    model = ModelSpec(basis, NIGPrior.build(basis, 1, lam=2.0, chi=2.0, B=10.0))
    tcfg = TreePriorConfig(0.5, 2.0, (4,))
    exact = exact_tree_posterior(x, y, model, tcfg)
    ds = FidelityDataset([FidelityLevel(x[:, None], y)], LINE)
    cfg = McmcConfig(n_iter=n_iter, burn_in=1000, seed=seed, tree_prior=tcfg)
    keys = [s["tree"].key() for s in run_sampler(ds, model, cfg).samples]
    out = []
    for key, p in exact.items():
        ind = np.array([k == key for k in keys], dtype=float)
        out.append((key, p, ind.mean(), batch_mcse(ind)))
    return out


def geweke_problem():
    X = np.array([[0.05], [0.3], [0.5], [0.7], [0.9], [0.15]])
    # level 1 sees points 0-3, level 2 sees 2-5: points 4, 5 are missing at level 1
    ds = FidelityDataset([FidelityLevel(X[:4], np.zeros(4)), FidelityLevel(X[2:], np.zeros(4))], LINE)
    basis = BasisSpec.constant(2)
    model = ModelSpec(basis, NIGPrior.build(basis, 1, b=0.0, B=1.0, g=0.5, G=1.0, lam=6.0, chi=5.0))
    return ds, model


def _geweke_stats(params, aug):
    p1, p2 = params[0]
    miss = aug.values[0, aug.missing[0]]
    return [p1.sigma2, p2.sigma2, p2.gamma[0], miss[0], miss[1], p2.gamma[0] ** 2, miss[0] * miss[1]]


def geweke_z(n=10_000, seed=2024):
    """Marginal-conditional vs successive-conditional simulation of the joint model.

    Returns one z-score per test function: both variances, the scale coefficient,
    the two missing outputs, and two second moments.
    """
    ds, model = geweke_problem()
    cfg = McmcConfig(n_iter=2, burn_in=0, partition_enabled=False)
    rng = np.random.default_rng(seed)
    state = initial_state(ds, model, cfg, rng)
    aug = state.aug
    prior = model.prior

    def draw_params():
        return {0: [prior_level_params(prior.levels[t], prior.phi, 1, rng) for t in range(2)]}

    forward = []
    for _ in range(n):
        params = draw_params()
        aug.values[:] = forward_simulate(aug, params, model, rng)
        forward.append(_geweke_stats(params, aug))

    state.params = draw_params()
    chain = []
    for _ in range(n):
        aug.values[:] = forward_simulate(aug, state.params, model, rng)
        state.invalidate()
        sweep(state, cfg, rng, ["params", "missing"])
        chain.append(_geweke_stats(state.params, aug))

    forward, chain = np.array(forward), np.array(chain)
    z = []
    for j in range(forward.shape[1]):
        se = math.sqrt(forward[:, j].var(ddof=1) / n + batch_mcse(chain[:, j]) ** 2)
        z.append((forward[:, j].mean() - chain[:, j].mean()) / se)
    return np.array(z)


def test_geweke_problem_has_two_missing_points():
    ds, model = geweke_problem()
    state = initial_state(ds, model, McmcConfig(n_iter=2, burn_in=0, partition_enabled=False),
                          np.random.default_rng(0))
    assert state.aug.missing[0].sum() == 2 and not state.aug.missing[1].any()


def test_geweke_short_run_is_finite():
    assert np.all(np.isfinite(geweke_z(n=200, seed=5)))


def test_missing_point_matches_conditional_as_signal_vanishes():
    """With a negligible scale discrepancy the imputation ignores the upper level."""
    X1 = np.array([[0.1], [0.35], [0.6], [0.85]])
    X2 = np.array([[0.5], [0.1], [0.85]])
    ds = FidelityDataset([FidelityLevel(X1, np.sin(3 * X1[:, 0])), FidelityLevel(X2, np.cos(X2[:, 0]))], LINE)
    basis = BasisSpec.constant(2)
    model = ModelSpec(basis, NIGPrior.build(basis, 1, g=0.0, G=1e-12))
    cfg = McmcConfig(n_iter=2, burn_in=0, partition_enabled=False, tree_prior=TreePriorConfig(min_points=(2, 2)))
    rng = np.random.default_rng(7)
    state = initial_state(ds, model, cfg, rng)
    for lp in state.params[0]:
        lp.phi = np.array([4.0])
        lp.sigma2 = 0.5
    state.params[0][1].gamma = np.array([1e-7])
    draws = []
    for _ in range(3000):
        update_missing(state, rng)
        draws.append(state.aug.values[0, state.aug.missing[0]][0])
    mu = missing_means(state.tree, state.params, state.aug, model)[0][0]
    # level-1 universal kriging of the missing point from the four level-1 observations, beta integrated out
    lp = state.params[0][0]
    R = corr_matrix(X1, None, lp.phi, model.nugget)
    r = corr_matrix(np.array([[0.5]]), X1, lp.phi)
    H, y1 = np.ones((4, 1)), np.sin(3 * X1[:, 0])
    Bi = np.linalg.inv(model.prior.levels[0].B)
    B_hat = np.linalg.inv(H.T @ np.linalg.solve(R, H) + Bi)
    beta = B_hat @ (H.T @ np.linalg.solve(R, y1) + Bi @ model.prior.levels[0].b)
    T = np.linalg.solve(R, r.T).T
    D = 1.0 - T @ H
    mean = beta + T @ (y1 - H @ beta)
    var = lp.sigma2 * (1 + model.nugget - T @ r.T + D @ B_hat @ D.T)
    assert mu == pytest.approx(mean[0], abs=1e-5)
    res = stats.kstest(draws, "norm", args=(mean[0], math.sqrt(var[0, 0])))
    assert res.pvalue > 1e-3
