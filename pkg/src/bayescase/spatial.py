"""Spatiotemporal probit-t model for binary areal data.

    y_it = 1(omega_it > 0)
    omega_it ~ N(x_i'beta + z_i'gamma + xi t + theta_it + phi_it, 1 / kappa_t)

with theta_t ~ N(0, I / tau_t), phi_t ~ intrinsic CAR(lambda_t W) centred to sum
to zero, gamma ~ CAR(W* / sigma2_0) over regions, kappa_t ~ G(nu/2, nu/2) (so
the marginal link is Student-t with nu degrees of freedom) and conjugate
Gamma priors on tau_t and lambda_t.  Sampled by a ten-step Gibbs sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse, stats
from scipy.sparse.csgraph import connected_components
from scipy.special import ndtr, ndtri

from .mcmc import ChainSpec, SamplerError, ValidationError, chain_iterations, make_rng

REGION_RIDGE = 1e-6


def _edge_array(edges, n: int) -> np.ndarray:
    e = np.asarray(edges, dtype=int).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValidationError("edge endpoint out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise ValidationError("adjacency contains a self-loop")
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0) if e.size else e


def build_car_precision(edges, n_units: int) -> tuple[np.ndarray, int, int]:
    """W with W_ii = number of neighbours, W_ij = -1 for neighbours.

    Returns ``(W, rank, n_components)``; rank(W) = n_units - n_components.
    """
    e = _edge_array(edges, n_units)
    if n_units < 1 or e.shape[0] == 0:
        raise ValidationError("adjacency graph has no edges")
    w = np.zeros((n_units, n_units))
    w[e[:, 0], e[:, 1]] = -1.0
    w[e[:, 1], e[:, 0]] = -1.0
    np.fill_diagonal(w, -w.sum(axis=1))
    graph = sparse.csr_matrix((np.ones(e.shape[0]), (e[:, 0], e[:, 1])), shape=(n_units, n_units))
    n_comp, _ = connected_components(graph, directed=False)
    return w, n_units - n_comp, n_comp


def grid_edges(nrow: int, ncol: int) -> np.ndarray:
    """Rook adjacency of an nrow x ncol grid, units numbered row-major."""
    idx = np.arange(nrow * ncol).reshape(nrow, ncol)
    horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    return np.vstack([horiz, vert])


@dataclass
class Lattice:
    """Unit adjacency with its CAR precision, plus region membership and region precision."""

    W: np.ndarray
    rank: int
    n_components: int
    region: np.ndarray  # (I,) region index in 0..L-1
    W_star: np.ndarray  # (L, L)
    eigvals: np.ndarray = field(repr=False, default=None)
    eigvecs: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_edges(cls, edges, n_units: int, region=None, region_edges=(), n_regions: int | None = None):
        w, rank, n_comp = build_car_precision(edges, n_units)
        region = np.zeros(n_units, dtype=int) if region is None else np.asarray(region, dtype=int)
        if region.shape != (n_units,):
            raise ValidationError("region must give one label per unit")
        L = int(region.max()) + 1 if n_regions is None else int(n_regions)
        if region.size and (region.min() < 0 or region.max() >= max(L, 1)):
            raise ValidationError("region label out of range")
        w_star = region_precision(region_edges, L)
        lam, u = np.linalg.eigh(w)
        return cls(w, rank, n_comp, region, w_star, lam, u)

    @property
    def n_units(self) -> int:
        return self.W.shape[0]

    @property
    def n_regions(self) -> int:
        return self.W_star.shape[0]

    @property
    def mean_neighbors(self) -> float:
        return float(np.mean(np.diag(self.W)))

    def Z(self) -> np.ndarray:
        z = np.zeros((self.n_units, self.n_regions))
        if self.n_regions:
            z[np.arange(self.n_units), self.region] = 1.0
        return z


def region_precision(region_edges, n_regions: int) -> np.ndarray:
    """CAR precision over regions; regions without neighbours get a 1e-6 diagonal ridge."""
    w = np.zeros((n_regions, n_regions))
    e = _edge_array(region_edges, max(n_regions, 1)) if n_regions else np.zeros((0, 2), int)
    if e.shape[0]:
        w[e[:, 0], e[:, 1]] = -1.0
        w[e[:, 1], e[:, 0]] = -1.0
        np.fill_diagonal(w, -w.sum(axis=1))
    isolated = np.diag(w) == 0
    w[isolated, isolated] = REGION_RIDGE
    return w


@dataclass
class PanelData:
    y: np.ndarray  # (I, T) in {0, 1}
    X: np.ndarray  # (I, K)
    Z: np.ndarray  # (I, L)

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.ndim != 2:
            raise ValidationError("y must be an I x T array")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValidationError("y must be binary")
        self.y = self.y.astype(np.int8)
        self.X = np.asarray(self.X, dtype=float).reshape(self.y.shape[0], -1)
        self.Z = np.asarray(self.Z, dtype=float).reshape(self.y.shape[0], -1)
        if self.Z.shape[1] and not np.allclose(self.Z.sum(axis=1), 1.0):
            raise ValidationError("each unit must belong to exactly one region")
        if not (np.all(np.isfinite(self.X))):
            raise ValidationError("covariates must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.y.shape[1] + 1, dtype=float)


def elicit_priors(mean_neighbors: float, b_tau: float) -> float:
    """b_lambda = 0.7^2 * mean_neighbors * b_tau, matching the prior sds of theta and phi."""
    if not mean_neighbors > 0:
        raise ValidationError("mean neighbour count must be positive")
    return 0.7**2 * mean_neighbors * b_tau


@dataclass(frozen=True)
class SpatialHyper:
    sigma2_0: float = 100.0
    nu_0: int = 2
    a_tau: float = 2.0
    b_tau: float = 2.0
    a_lambda: float = 2.0
    b_lambda: float = 1.0

    def __post_init__(self):
        for name in ("sigma2_0", "nu_0", "a_tau", "b_tau", "a_lambda", "b_lambda"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def default(cls, lattice: Lattice, **overrides) -> "SpatialHyper":
        b_tau = overrides.get("b_tau", 2.0)
        kw = {"b_lambda": elicit_priors(lattice.mean_neighbors, b_tau)}
        kw.update(overrides)
        return cls(**kw)


def t_link(eta, nu_0: float):
    """Student-t CDF with nu_0 degrees of freedom."""
    if not nu_0 >= 1:
        raise ValidationError("nu_0 must be at least 1")
    return stats.t.cdf(eta, df=nu_0)


@dataclass
class SpatialState:
    omega: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    xi: float
    kappa: np.ndarray
    tau: np.ndarray
    lam: np.ndarray

    def copy(self) -> "SpatialState":
        return SpatialState(self.omega.copy(), self.theta.copy(), self.phi.copy(), self.beta.copy(),
                            self.gamma.copy(), float(self.xi), self.kappa.copy(), self.tau.copy(),
                            self.lam.copy())


def truncated_normal_positive(mean, sd, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(mean, sd^2) restricted to (0, inf), elementwise.

    Inverse CDF on the upper-tail mass when the bound is within 5 sd of the
    mean, exponential rejection (Robert 1995) further out.
    """
    mean, sd = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(sd, dtype=float))
    shape = mean.shape
    mean, sd = mean.ravel(), sd.ravel()
    a = -mean / sd
    z = np.empty(a.shape)
    bulk = a < 5.0
    if np.any(bulk):
        u = 1.0 - rng.random(int(bulk.sum()))
        z[bulk] = np.maximum(-ndtri(u * ndtr(-a[bulk])), a[bulk])
    tail = np.flatnonzero(~bulk)
    if tail.size:
        at = a[tail]
        lam = 0.5 * (at + np.sqrt(at**2 + 4.0))
        out = at.copy()
        todo = np.arange(tail.size)
        for _ in range(1000):
            cand = at[todo] + rng.exponential(1.0 / lam[todo])
            ok = rng.random(todo.size) <= np.exp(-0.5 * (cand - lam[todo]) ** 2)
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
        z[tail] = out
    return (mean + sd * z).reshape(shape)


def _fixed_effects(state: SpatialState, data: PanelData) -> np.ndarray:
    return (data.X @ state.beta + data.Z @ state.gamma)[:, None] + state.xi * data.times[None, :]


def linear_predictor(state: SpatialState, data: PanelData) -> np.ndarray:
    return _fixed_effects(state, data) + state.theta + state.phi


def sample_omega_trunc(state: SpatialState, data: PanelData, rng: np.random.Generator) -> np.ndarray:
    """omega_it | rest: normal truncated to (0, inf) if y = 1 and (-inf, 0] if y = 0."""
    mean = linear_predictor(state, data)
    sd = np.broadcast_to(1.0 / np.sqrt(state.kappa)[None, :], mean.shape)
    sign = 2.0 * data.y - 1.0
    return sign * truncated_normal_positive(sign * mean, sd, rng)


def _gauss_draw(mean: np.ndarray, prec: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    try:
        c = linalg.cholesky(prec, lower=True)
    except linalg.LinAlgError as exc:
        raise SamplerError("full-conditional precision is not positive definite") from exc
    return mean + linalg.solve_triangular(c.T, rng.standard_normal(mean.size), lower=False)


def beta_conditional(state: SpatialState, data: PanelData, hyper: SpatialHyper):
    """Mean and precision of beta | rest."""
    r = state.omega - (data.Z @ state.gamma)[:, None] - state.xi * data.times - state.theta - state.phi
    K = data.X.shape[1]
    prec = np.eye(K) / hyper.sigma2_0 + state.kappa.sum() * data.X.T @ data.X
    mean = linalg.solve(prec, data.X.T @ (r @ state.kappa), assume_a="pos")
    return mean, prec


def sample_beta(state, data, hyper, rng):
    return _gauss_draw(*beta_conditional(state, data, hyper), rng)


def gamma_conditional(state: SpatialState, data: PanelData, lattice: Lattice, hyper: SpatialHyper):
    """Mean and precision of gamma | rest (region CAR prior with precision W*/sigma2_0)."""
    r = state.omega - (data.X @ state.beta)[:, None] - state.xi * data.times - state.theta - state.phi
    prec = lattice.W_star / hyper.sigma2_0 + state.kappa.sum() * data.Z.T @ data.Z
    try:
        mean = linalg.solve(prec, data.Z.T @ (r @ state.kappa), assume_a="pos")
    except linalg.LinAlgError as exc:
        raise SamplerError("gamma full-conditional precision is not positive definite") from exc
    return mean, prec


def sample_gamma_car(state, data, lattice, hyper, rng):
    if data.Z.shape[1] == 0:
        return state.gamma
    return _gauss_draw(*gamma_conditional(state, data, lattice, hyper), rng)


def xi_conditional(state: SpatialState, data: PanelData, hyper: SpatialHyper):
    """Mean and variance of xi | rest."""
    t = data.times
    r = state.omega - (data.X @ state.beta + data.Z @ state.gamma)[:, None] - state.theta - state.phi
    I = data.y.shape[0]
    v = 1.0 / (1.0 / hyper.sigma2_0 + I * float(np.sum(state.kappa * t**2)))
    m = v * float(np.sum(r * (state.kappa * t)[None, :]))
    return m, v


def sample_xi(state, data, hyper, rng) -> float:
    m, v = xi_conditional(state, data, hyper)
    return m + math.sqrt(v) * rng.standard_normal()


def theta_conditional(state: SpatialState, data: PanelData):
    """Per-cell mean and per-time variance of theta_t | rest."""
    r = state.omega - _fixed_effects(state, data) - state.phi
    v = 1.0 / (state.tau + state.kappa)
    return v[None, :] * state.kappa[None, :] * r, v


def sample_theta_t(state, data, rng) -> np.ndarray:
    m, v = theta_conditional(state, data)
    return m + np.sqrt(v)[None, :] * rng.standard_normal(m.shape)


def phi_conditional(state: SpatialState, data: PanelData, lattice: Lattice):
    """Mean (I, T) of phi_t | rest and the eigenvalues (I, T) of its precision lambda_t W + kappa_t I."""
    r = state.omega - _fixed_effects(state, data) - state.theta
    u, ev = lattice.eigvecs, lattice.eigvals
    prec_eig = ev[:, None] * state.lam[None, :] + state.kappa[None, :]
    mean = u @ ((u.T @ (state.kappa[None, :] * r)) / prec_eig)
    return mean, prec_eig


def sample_phi_t(state, data, lattice, rng) -> np.ndarray:
    """Draw phi_t ~ N(V_t kappa_t r_t, V_t), V_t = (lambda_t W + kappa_t I)^{-1}, via W's eigenbasis."""
    mean, prec_eig = phi_conditional(state, data, lattice)
    if not np.all(prec_eig > 0):
        raise SamplerError("lambda_t W + kappa_t I is not positive definite")
    z = rng.standard_normal(mean.shape)
    return mean + lattice.eigvecs @ (z / np.sqrt(prec_eig))


def center_phi(phi: np.ndarray) -> np.ndarray:
    return phi - phi.mean(axis=0, keepdims=True)


def kappa_conditional(state, data, hyper):
    resid = state.omega - linear_predictor(state, data)
    I = data.y.shape[0]
    return (hyper.nu_0 + I) / 2.0, (hyper.nu_0 + np.sum(resid**2, axis=0)) / 2.0


def tau_conditional(state, hyper):
    I = state.theta.shape[0]
    return hyper.a_tau + I / 2.0, hyper.b_tau + 0.5 * np.sum(state.theta**2, axis=0)


def lambda_conditional(state, lattice, hyper):
    quad = np.einsum("it,ij,jt->t", state.phi, lattice.W, state.phi)
    return hyper.a_lambda + lattice.rank / 2.0, hyper.b_lambda + 0.5 * quad


def _gamma_draw(shape, rate, rng):
    return rng.gamma(shape, 1.0 / np.asarray(rate))


def sample_kappa(state, data, hyper, rng):
    return _gamma_draw(*kappa_conditional(state, data, hyper), rng)


def sample_tau(state, hyper, rng):
    return _gamma_draw(*tau_conditional(state, hyper), rng)


def sample_lambda(state, lattice, hyper, rng):
    return _gamma_draw(*lambda_conditional(state, lattice, hyper), rng)


def log_joint(state: SpatialState, data: PanelData, lattice: Lattice, hyper: SpatialHyper) -> float:
    """Unnormalised log posterior; the improper CAR factors use lambda^{rank(W)/2}."""
    if np.any((state.omega > 0) != (data.y == 1)):
        return -math.inf
    if np.any(state.kappa <= 0) or np.any(state.tau <= 0) or np.any(state.lam <= 0):
        return -math.inf
    I, T = data.y.shape
    lp = 0.0
    r = state.omega - linear_predictor(state, data)
    for t in range(T):
        lp += stats.norm.logpdf(r[:, t], scale=1 / math.sqrt(state.kappa[t])).sum()
        lp += stats.norm.logpdf(state.theta[:, t], scale=1 / math.sqrt(state.tau[t])).sum()
        ph = state.phi[:, t]
        lp += 0.5 * lattice.rank * math.log(state.lam[t]) - 0.5 * state.lam[t] * ph @ lattice.W @ ph
    s0 = math.sqrt(hyper.sigma2_0)
    lp += stats.norm.logpdf(state.beta, scale=s0).sum() + stats.norm.logpdf(state.xi, scale=s0)
    lp += -0.5 * state.gamma @ lattice.W_star @ state.gamma / hyper.sigma2_0
    nu = hyper.nu_0
    lp += stats.gamma.logpdf(state.kappa, nu / 2, scale=2 / nu).sum()
    lp += stats.gamma.logpdf(state.tau, hyper.a_tau, scale=1 / hyper.b_tau).sum()
    lp += stats.gamma.logpdf(state.lam, hyper.a_lambda, scale=1 / hyper.b_lambda).sum()
    return float(lp)


def initial_state(data: PanelData, rng: np.random.Generator) -> SpatialState:
    I, T = data.y.shape
    sign = 2.0 * data.y - 1.0
    omega = sign * truncated_normal_positive(np.zeros((I, T)), np.ones((I, T)), rng)
    return SpatialState(omega=omega, theta=np.zeros((I, T)), phi=np.zeros((I, T)),
                        beta=np.zeros(data.X.shape[1]), gamma=np.zeros(data.Z.shape[1]), xi=0.0,
                        kappa=np.ones(T), tau=np.ones(T), lam=np.ones(T))


BLOCKS = ("omega", "beta", "gamma", "xi", "theta", "phi", "kappa", "tau", "lam")


@dataclass
class SpatialFit:
    chain: ChainSpec
    beta: np.ndarray  # (retained, K)
    gamma: np.ndarray  # (retained, L)
    xi: np.ndarray
    kappa: np.ndarray  # (retained, T)
    tau: np.ndarray
    lam: np.ndarray
    random_effects_mean: np.ndarray  # (I, T) posterior mean of theta + phi
    max_abs_phi_sum: float  # largest |sum_i phi_it| seen after any sweep

    def scalar_traces(self) -> dict[str, np.ndarray]:
        out = {f"beta{k + 1}": self.beta[:, k] for k in range(self.beta.shape[1])}
        out.update({f"gamma{l + 1}": self.gamma[:, l] for l in range(self.gamma.shape[1])})
        out["xi"] = self.xi
        return out


def fit_spatial(data: PanelData, lattice: Lattice, hyper: SpatialHyper | None = None,
                chain: ChainSpec | None = None, init: SpatialState | None = None,
                fixed: tuple[str, ...] = ()) -> SpatialFit:
    """Ten-step Gibbs sweep.  Blocks named in ``fixed`` stay at their initial values."""
    I, T = data.y.shape
    if lattice.n_units != I:
        raise ValidationError("lattice and panel disagree on the number of units")
    if data.Z.shape[1] != lattice.n_regions:
        raise ValidationError("region indicator matrix does not match the lattice regions")
    unknown = set(fixed) - set(BLOCKS)
    if unknown:
        raise ValidationError(f"unknown blocks in fixed: {sorted(unknown)}")
    hyper = hyper or SpatialHyper.default(lattice)
    chain = chain or ChainSpec(5000, 1000, 2)
    rng = chain.rng()
    state = init.copy() if init is not None else initial_state(data, rng)
    n = chain.n_retained
    K, L = data.X.shape[1], data.Z.shape[1]
    tr = {"beta": np.empty((n, K)), "gamma": np.empty((n, L)), "xi": np.empty(n),
          "kappa": np.empty((n, T)), "tau": np.empty((n, T)), "lam": np.empty((n, T))}
    re_sum = np.zeros((I, T))
    max_sum = 0.0
    free = {b: b not in fixed for b in BLOCKS}
    for _, slot in chain_iterations(chain):
        if free["omega"]:
            state.omega = sample_omega_trunc(state, data, rng)
        if free["beta"]:
            state.beta = sample_beta(state, data, hyper, rng)
        if free["gamma"]:
            state.gamma = sample_gamma_car(state, data, lattice, hyper, rng)
        if free["xi"]:
            state.xi = sample_xi(state, data, hyper, rng)
        if free["theta"]:
            state.theta = sample_theta_t(state, data, rng)
        if free["phi"]:
            state.phi = center_phi(sample_phi_t(state, data, lattice, rng))
        if free["kappa"]:
            state.kappa = sample_kappa(state, data, hyper, rng)
        if free["tau"]:
            state.tau = sample_tau(state, hyper, rng)
        if free["lam"]:
            state.lam = sample_lambda(state, lattice, hyper, rng)
        max_sum = max(max_sum, float(np.max(np.abs(state.phi.sum(axis=0)))))
        if slot is not None:
            tr["beta"][slot] = state.beta
            tr["gamma"][slot] = state.gamma
            tr["xi"][slot] = state.xi
            tr["kappa"][slot] = state.kappa
            tr["tau"][slot] = state.tau
            tr["lam"][slot] = state.lam
            re_sum += state.theta + state.phi
    return SpatialFit(chain, tr["beta"], tr["gamma"], tr["xi"], tr["kappa"], tr["tau"], tr["lam"],
                      re_sum / n, max_sum)


@dataclass
class SpatialTruth:
    beta: np.ndarray
    gamma: np.ndarray
    xi: float
    theta: np.ndarray  # (I, T)
    phi: np.ndarray  # (I, T)
    kappa: np.ndarray | None = None  # None: draw kappa_t ~ G(nu/2, nu/2) per call


def simulate_random_effects(lattice: Lattice, T: int, tau: float, lam: float,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """theta_t ~ N(0, I/tau); phi_t ~ intrinsic CAR(lam W) drawn in W's range (sums to zero per component)."""
    I = lattice.n_units
    theta = rng.standard_normal((I, T)) / math.sqrt(tau)
    ev, u = lattice.eigvals, lattice.eigvecs
    keep = ev > 1e-9 * ev.max()
    z = rng.standard_normal((int(keep.sum()), T))
    phi = u[:, keep] @ (z / np.sqrt(lam * ev[keep])[:, None])
    return theta, center_phi(phi)


def synth_spatial_data(lattice: Lattice, X: np.ndarray, truth: SpatialTruth, T: int,
                       nu_0: float = 2, seed: int | np.random.Generator = 0) -> PanelData:
    """Simulate omega from the model and threshold at zero."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    I = lattice.n_units
    X = np.asarray(X, dtype=float).reshape(I, -1)
    Z = lattice.Z()
    kappa = truth.kappa if truth.kappa is not None else rng.gamma(nu_0 / 2, 2 / nu_0, size=T)
    eta = (X @ truth.beta + Z @ truth.gamma)[:, None] + truth.xi * np.arange(1, T + 1)[None, :]
    eta = eta + truth.theta + truth.phi
    omega = eta + rng.standard_normal((I, T)) / np.sqrt(kappa)[None, :]
    return PanelData((omega > 0).astype(np.int8), X, Z)
