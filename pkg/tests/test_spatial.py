import math

import numpy as np
import pytest
from scipy import integrate, stats

from bayescase import spatial as sp
from bayescase.mcmc import ChainSpec, ValidationError, make_rng
from oracles import assert_grid_ratio


# Graph and prior helpers ------------------------------------------------------------


def test_path_graph_precision():
    w, rank, comp = sp.build_car_precision([(0, 1), (1, 2)], 3)
    assert w.tolist() == [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
    assert (rank, comp) == (2, 1)


def test_rank_matches_eigen_oracle():
    rng = make_rng(0)
    for n in range(3, 12):
        # random spanning tree plus extra edges keeps the graph connected
        edges = [(i, int(rng.integers(0, i))) for i in range(1, n)]
        edges += [tuple(rng.choice(n, 2, replace=False)) for _ in range(n // 2)]
        w, rank, _ = sp.build_car_precision(edges, n)
        ev = np.linalg.eigvalsh(w)
        assert rank == n - 1 == int(np.sum(ev > 1e-9))
        assert np.allclose(w.sum(axis=1), 0) and np.allclose(w, w.T)
    w, rank, comp = sp.build_car_precision([(0, 1), (2, 3)], 4)
    assert (rank, comp) == (2, 2) and int(np.sum(np.linalg.eigvalsh(w) > 1e-9)) == 2


def test_graph_validation():
    with pytest.raises(ValidationError):
        sp.build_car_precision([], 3)
    with pytest.raises(ValidationError):
        sp.build_car_precision([(1, 1)], 3)


def test_grid_edges_neighbor_counts():
    w, rank, _ = sp.build_car_precision(sp.grid_edges(7, 7), 49)
    assert rank == 48
    assert sorted(set(np.diag(w))) == [2, 3, 4]
    assert np.mean(np.diag(w)) == pytest.approx(2 * 84 / 49)


def test_region_ridge_for_isolated():
    w = sp.region_precision([], 2)
    assert np.allclose(w, sp.REGION_RIDGE * np.eye(2))


def test_elicit_priors():
    assert sp.elicit_priors(4, 2) == pytest.approx(3.92)
    assert sp.elicit_priors(1, 1) == pytest.approx(0.49)
    # equal prior sds: 1/sqrt(tau) = 1/(0.7 sqrt(m lam)) when tau = 0.49 m lam
    m, lam = 3.3, 1.7
    assert 1 / math.sqrt(0.49 * m * lam) == pytest.approx(1 / (0.7 * math.sqrt(m * lam)))


def test_t_link():
    assert sp.t_link(0.0, 2) == 0.5
    assert sp.t_link(1.0, 1) == pytest.approx(0.75)
    dens = lambda x: (1 + x * x / 2) ** -1.5 / (2 * math.sqrt(2))
    assert sp.t_link(1.0, 2) == pytest.approx(0.5 + integrate.quad(dens, 0, 1)[0], abs=1e-10)
    assert sp.t_link(1.0, 2) == pytest.approx(0.78868, abs=1e-5)


# Truncated normal -------------------------------------------------------------------


def test_truncnorm_half_normal():
    d = sp.truncated_normal_positive(np.zeros(200000), np.ones(200000), make_rng(1))
    assert np.all(d > 0)
    assert abs(d.mean() - math.sqrt(2 / math.pi)) < 4 * math.sqrt((1 - 2 / math.pi) / 200000)


def test_truncnorm_far_tail():
    d = sp.truncated_normal_positive(np.full(50000, -10.0), np.ones(50000), make_rng(2))
    assert np.all(np.isfinite(d)) and np.all(d > 0)
    a = 10.0
    ref = stats.truncnorm.mean(a, np.inf, loc=-10.0)
    assert abs(d.mean() - ref) < 4 * stats.truncnorm.std(a, np.inf, loc=-10.0) / math.sqrt(50000)


def test_truncnorm_matches_scipy_mid_tail():
    for mean in (1.0, -2.0, -4.9, -6.0):
        d = sp.truncated_normal_positive(np.full(40000, mean), np.full(40000, 0.7), make_rng(3))
        a = -mean / 0.7
        ks = stats.kstest(d, stats.truncnorm(a, np.inf, loc=mean, scale=0.7).cdf)
        assert ks.pvalue > 1e-3


def test_truncnorm_shape_preserved():
    assert sp.truncated_normal_positive(np.zeros((3, 4)), 1.0, make_rng(4)).shape == (3, 4)
    assert sp.truncated_normal_positive(0.0, 1.0, make_rng(4)).shape == ()


# Small model instance ---------------------------------------------------------------


def small_model(seed=0, I=4, T=2):
    rng = make_rng(seed)
    lat = sp.Lattice.from_edges([(0, 1), (1, 2), (2, 3)], I, region=[0, 0, 1, 1], region_edges=[(0, 1)])
    X = np.column_stack([np.ones(I), rng.normal(size=I)])
    y = rng.integers(0, 2, (I, T))
    data = sp.PanelData(y, X, lat.Z())
    sign = 2.0 * y - 1
    state = sp.SpatialState(omega=sign * rng.uniform(0.1, 1.5, (I, T)), theta=rng.normal(0, 0.3, (I, T)),
                            phi=sp.center_phi(rng.normal(0, 0.3, (I, T))), beta=rng.normal(size=2),
                            gamma=rng.normal(size=2), xi=0.1, kappa=rng.uniform(0.5, 2, T),
                            tau=rng.uniform(0.5, 2, T), lam=rng.uniform(0.5, 2, T))
    hyper = sp.SpatialHyper.default(lat)
    return lat, data, state, hyper


def _with(state, **kw):
    s = state.copy()
    for k, v in kw.items():
        setattr(s, k, v)
    return s


def _mvn_prec_logpdf(mean, prec):
    cov = np.linalg.inv(prec)
    return lambda v: stats.multivariate_normal.logpdf(v, mean, cov)


def test_grid_ratio_regression_blocks():
    lat, data, state, hyper = small_model()
    rng = make_rng(5)
    joint = lambda s: sp.log_joint(s, data, lat, hyper)

    m, P = sp.beta_conditional(state, data, hyper)
    vals = [state.beta + rng.normal(size=2) for _ in range(5)]
    assert_grid_ratio(_mvn_prec_logpdf(m, P), lambda b: joint(_with(state, beta=b)), vals)

    m, P = sp.gamma_conditional(state, data, lat, hyper)
    vals = [state.gamma + rng.normal(size=2) for _ in range(5)]
    assert_grid_ratio(_mvn_prec_logpdf(m, P), lambda g: joint(_with(state, gamma=g)), vals)

    m, v = sp.xi_conditional(state, data, hyper)
    assert_grid_ratio(lambda x: stats.norm.logpdf(x, m, math.sqrt(v)),
                      lambda x: joint(_with(state, xi=x)), [-1.0, -0.2, 0.3, 1.1])


def test_grid_ratio_random_effects():
    lat, data, state, hyper = small_model(seed=1)
    rng = make_rng(6)
    joint = lambda s: sp.log_joint(s, data, lat, hyper)

    m, v = sp.theta_conditional(state, data)
    lp = lambda th: stats.norm.logpdf(th, m, np.sqrt(v)[None, :]).sum()
    vals = [state.theta + rng.normal(0, 0.5, state.theta.shape) for _ in range(5)]
    assert_grid_ratio(lp, lambda th: joint(_with(state, theta=th)), vals)

    m, prec_eig = sp.phi_conditional(state, data, lat)
    u = lat.eigvecs

    def lp_phi(ph):
        out = 0.0
        for t in range(ph.shape[1]):
            P = u @ np.diag(prec_eig[:, t]) @ u.T
            out += _mvn_prec_logpdf(m[:, t], P)(ph[:, t])
        return out

    vals = [state.phi + rng.normal(0, 0.5, state.phi.shape) for _ in range(5)]
    assert_grid_ratio(lp_phi, lambda ph: joint(_with(state, phi=ph)), vals)


def test_grid_ratio_precisions():
    lat, data, state, hyper = small_model(seed=2)
    joint = lambda s: sp.log_joint(s, data, lat, hyper)
    grid = [np.array([0.3, 0.8]), np.array([1.0, 1.0]), np.array([2.5, 0.4]), np.array([0.7, 3.0])]
    for name, (a, b) in (("kappa", sp.kappa_conditional(state, data, hyper)),
                         ("tau", sp.tau_conditional(state, hyper)),
                         ("lam", sp.lambda_conditional(state, lat, hyper))):
        lp = lambda v, a=a, b=b: stats.gamma.logpdf(v, a, scale=1 / b).sum()
        assert_grid_ratio(lp, lambda v, n=name: joint(_with(state, **{n: v})), grid)


def test_grid_ratio_omega():
    lat, data, state, hyper = small_model(seed=3)
    mean = sp.linear_predictor(state, data)
    sd = 1 / np.sqrt(state.kappa)
    i, t = 1, 0
    sgn = 1.0 if data.y[i, t] else -1.0

    def cond(w):
        return stats.norm.logpdf(w, mean[i, t], sd[t])

    def joint(w):
        om = state.omega.copy()
        om[i, t] = w
        return sp.log_joint(_with(state, omega=om), data, lat, hyper)

    assert_grid_ratio(cond, joint, [sgn * x for x in (0.05, 0.4, 1.2, 3.0)])
    assert joint(-sgn * 0.5) == -math.inf


def test_phi_conditional_dense_path_graph():
    lat = sp.Lattice.from_edges([(0, 1), (1, 2)], 3)
    rng = make_rng(7)
    data = sp.PanelData(rng.integers(0, 2, (3, 2)), np.ones((3, 1)), lat.Z())
    state = sp.SpatialState(omega=(2.0 * data.y - 1) * 0.7, theta=rng.normal(size=(3, 2)),
                            phi=np.zeros((3, 2)), beta=np.array([0.2]), gamma=np.zeros(1), xi=-0.1,
                            kappa=np.array([1.3, 0.6]), tau=np.ones(2), lam=np.array([0.8, 2.0]))
    mean, prec_eig = sp.phi_conditional(state, data, lat)
    r = state.omega - sp._fixed_effects(state, data) - state.theta
    for t in range(2):
        P = state.lam[t] * lat.W + state.kappa[t] * np.eye(3)
        assert np.allclose(mean[:, t], np.linalg.solve(P, state.kappa[t] * r[:, t]), atol=1e-10)
        assert np.allclose(lat.eigvecs @ np.diag(prec_eig[:, t]) @ lat.eigvecs.T, P, atol=1e-10)


def test_phi_small_lambda_is_iid():
    lat, data, state, hyper = small_model(seed=4)
    s = _with(state, lam=np.full(2, 1e-12))
    _, prec_eig = sp.phi_conditional(s, data, lat)
    assert np.allclose(prec_eig, state.kappa[None, :], atol=1e-10)


def test_zero_effects_gamma_parameters():
    lat, data, state, hyper = small_model(seed=5)
    s = _with(state, phi=np.zeros_like(state.phi), theta=np.zeros_like(state.theta))
    a, b = sp.lambda_conditional(s, lat, hyper)
    assert a == hyper.a_lambda + lat.rank / 2 and np.all(b == hyper.b_lambda)
    a, b = sp.tau_conditional(s, hyper)
    assert a == hyper.a_tau + 2.0 and np.all(b == hyper.b_tau)


def test_beta_scalar_reduction():
    lat, data, state, hyper = small_model(seed=6)
    d1 = sp.PanelData(data.y, np.ones((4, 1)), data.Z)
    s = _with(state, beta=np.zeros(1), kappa=np.ones(2))
    _, P = sp.beta_conditional(s, d1, hyper)
    assert P[0, 0] == pytest.approx(1 / hyper.sigma2_0 + 4 * 2)


def test_beta_flat_prior_zero_residual():
    lat, data, state, hyper = small_model(seed=7)
    # omega equal to every effect except X beta leaves a zero residual for beta
    s = _with(state, omega=sp.linear_predictor(state, data) - (data.X @ state.beta)[:, None])
    flat = sp.SpatialHyper(sigma2_0=1e14)
    m, P = sp.beta_conditional(s, data, flat)
    assert np.allclose(m, 0, atol=1e-8)
    expect = state.kappa.sum() * data.X.T @ data.X
    assert np.allclose(P, expect, rtol=1e-10)


def test_centering():
    phi = make_rng(8).normal(size=(6, 3))
    assert np.allclose(sp.center_phi(phi).sum(axis=0), 0, atol=1e-12)


def test_omega_sign_coupling():
    lat, data, state, hyper = small_model(seed=9)
    s = _with(state, beta=np.array([-12.0, 0.0]))
    for k in range(20):
        om = sp.sample_omega_trunc(s, data, make_rng(k))
        assert np.all((om > 0) == (data.y == 1)) and np.all(np.isfinite(om))


# Generator --------------------------------------------------------------------------


def test_generator_extremes():
    lat = sp.Lattice.from_edges(sp.grid_edges(2, 2), 4)
    zero = np.zeros((4, 8))
    truth = sp.SpatialTruth(np.array([0.0]), np.zeros(1), -50.0, zero, zero)
    d = sp.synth_spatial_data(lat, np.ones(4), truth, 8, seed=1)
    assert d.y[:, 2:].sum() == 0
    truth = sp.SpatialTruth(np.array([0.0]), np.zeros(1), 0.0, zero, zero, kappa=np.full(8, 1e8))
    ys = np.array([sp.synth_spatial_data(lat, np.ones(4), truth, 8, seed=k).y for k in range(500)])
    assert abs(ys.mean() - 0.5) < 4 * math.sqrt(0.25 / ys.size)


def test_generator_round_trip_t_link():
    lat = sp.Lattice.from_edges([(0, 1), (1, 2)], 3)
    rng = make_rng(10)
    theta, phi = sp.simulate_random_effects(lat, 2, 2.0, 1.0, rng)
    truth = sp.SpatialTruth(np.array([0.3]), np.zeros(1), -0.2, theta, phi)
    X = np.ones(3)
    n = 10000
    ys = np.array([sp.synth_spatial_data(lat, X, truth, 2, nu_0=2, seed=rng).y for _ in range(n)])
    eta = 0.3 - 0.2 * np.arange(1, 3)[None, :] + theta + phi
    p = sp.t_link(eta, 2)
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(ys.mean(axis=0) - p) < 3.5 * se)


def test_simulated_phi_sums_to_zero():
    lat = sp.Lattice.from_edges(sp.grid_edges(3, 3), 9)
    _, phi = sp.simulate_random_effects(lat, 5, 1.0, 1.0, make_rng(11))
    assert np.allclose(phi.sum(axis=0), 0, atol=1e-10)


# Full sampler -------------------------------------------------------------------------


def _albert_chib(y, X, sigma2_0, n_iter, burn, rng):
    """Independent probit data-augmentation sampler (unit latent variance, flat-ish normal prior)."""
    n, K = X.shape
    prec = np.eye(K) / sigma2_0 + X.T @ X
    cov = np.linalg.inv(prec)
    chol = np.linalg.cholesky(cov)
    beta = np.zeros(K)
    out = []
    for it in range(n_iter):
        mu = X @ beta
        lo = np.where(y == 1, -mu, -np.inf)
        hi = np.where(y == 1, np.inf, -mu)
        z = mu + stats.truncnorm.rvs(lo, hi, random_state=rng)
        beta = cov @ (X.T @ z) + chol @ rng.standard_normal(K)
        if it >= burn:
            out.append(beta)
    return np.array(out)


def test_probit_reduction_matches_data_augmentation_oracle():
    rng = make_rng(12)
    I, T = 60, 5
    lat = sp.Lattice.from_edges(sp.grid_edges(6, 10), I, n_regions=0)
    X = np.column_stack([np.ones(I), rng.normal(size=I)])
    eta = (X @ np.array([0.3, 1.0]))[:, None] + np.zeros((1, T))
    y = (eta + rng.standard_normal((I, T)) > 0).astype(int)
    data = sp.PanelData(y, X, lat.Z())
    hyper = sp.SpatialHyper.default(lat)
    init = sp.initial_state(data, make_rng(0))
    fit = sp.fit_spatial(data, lat, hyper, ChainSpec(4000, 500, 1, 3), init=init,
                         fixed=("gamma", "xi", "theta", "phi", "kappa", "tau", "lam"))
    Xs = np.repeat(X, T, axis=0)
    ref = _albert_chib(y.ravel(), Xs, hyper.sigma2_0, 4000, 500, make_rng(4))
    sd = ref.std(axis=0)
    assert np.all(np.abs(fit.beta.mean(axis=0) - ref.mean(axis=0)) < 0.25 * sd)
    assert np.allclose(fit.beta.std(axis=0), sd, rtol=0.2)


def test_fit_spatial_invariants_and_reproducible():
    lat = sp.Lattice.from_edges(sp.grid_edges(3, 3), 9, region=[0] * 5 + [1] * 4, region_edges=[(0, 1)])
    rng = make_rng(13)
    theta, phi = sp.simulate_random_effects(lat, 4, 2.0, 1.0, rng)
    X = np.column_stack([np.ones(9), rng.normal(size=9)])
    truth = sp.SpatialTruth(np.array([0.2, 1.0]), np.array([0.3, -0.3]), -0.1, theta, phi)
    data = sp.synth_spatial_data(lat, X, truth, 4, seed=14)
    f1 = sp.fit_spatial(data, lat, chain=ChainSpec(300, 100, 2, 5))
    f2 = sp.fit_spatial(data, lat, chain=ChainSpec(300, 100, 2, 5))
    assert np.array_equal(f1.beta, f2.beta) and np.array_equal(f1.random_effects_mean, f2.random_effects_mean)
    assert f1.max_abs_phi_sum < 1e-10
    assert f1.beta.shape == (100, 2) and f1.gamma.shape == (100, 2)
    assert np.all(f1.kappa > 0) and np.all(f1.tau > 0) and np.all(f1.lam > 0)
    assert set(f1.scalar_traces()) == {"beta1", "beta2", "gamma1", "gamma2", "xi"}


def test_fit_spatial_validation():
    lat = sp.Lattice.from_edges(sp.grid_edges(2, 2), 4)
    data = sp.PanelData(np.zeros((4, 2)), np.ones(4), lat.Z())
    with pytest.raises(ValidationError):
        sp.fit_spatial(data, lat, fixed=("nope",))
    other = sp.Lattice.from_edges([(0, 1), (1, 2)], 3)
    with pytest.raises(ValidationError):
        sp.fit_spatial(data, other)
    with pytest.raises(ValidationError):
        sp.PanelData(np.full((2, 2), 2), np.ones(2), np.ones((2, 1)))
