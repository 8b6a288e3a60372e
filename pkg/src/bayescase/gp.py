"""Gaussian-process nonparametric regression with a Metropolis-within-Gibbs sampler.

Model: y_i = f(x_i) + N(0, sigma2) noise, f ~ GP(mu, tau2 * exp(-phi |x - x'|^alpha))
with inverse-gamma priors on sigma2 and tau2, a normal prior on mu and a
uniform prior on phi.  The latent values theta_i = f(x_i) are sampled jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .mcmc import (BoundedTransform, ChainSpec, RwmKernel, SamplerError, ValidationError,
                   chain_iterations, make_rng)


def true_f(x):
    """Regression function used by the synthetic benchmark."""
    x = np.asarray(x, dtype=float)
    return 0.3 + 0.4 * x + 0.5 * np.sin(2.7 * x) + 1.1 / (1.0 + x**2)


@dataclass(frozen=True)
class GpData:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.size != y.size:
            raise ValidationError("x and y must have equal length")
        if x.size < 2:
            raise ValidationError("need at least two observations")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("x and y must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class GpHyper:
    a_sigma: float
    b_sigma: float
    a_mu: float
    b_mu: float
    a_tau: float
    b_tau: float
    a_phi: float = 0.1
    b_phi: float = 10.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("a_sigma", "b_sigma", "b_mu", "a_tau", "b_tau"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.a_phi < self.b_phi:
            raise ValidationError("need 0 < a_phi < b_phi")
        if not 0 < self.alpha <= 2:
            raise ValidationError("alpha must lie in (0, 2]")


@dataclass
class GpState:
    theta: np.ndarray
    sigma2: float
    mu: float
    tau2: float
    phi: float


def power_exp_cov(x, tau2: float, phi: float, alpha: float = 1.0) -> np.ndarray:
    """H_ij = tau2 * exp(-phi |x_i - x_j|^alpha)."""
    x = np.asarray(x, dtype=float).ravel()
    if not 0 < alpha <= 2:
        raise ValidationError("alpha must lie in (0, 2]")
    d = np.abs(x[:, None] - x[None, :])
    h = tau2 * np.exp(-phi * d**alpha)
    if not np.all(np.isfinite(h)):
        raise SamplerError("covariance matrix has non-finite entries")
    return h


def cholesky_jitter(a: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lower Cholesky factor, adding 1e-8*scale .. 1e-4*scale to the diagonal if needed."""
    try:
        return linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    jitter = 1e-8
    while jitter <= 1e-4 * (1 + 1e-12):
        try:
            return linalg.cholesky(a + jitter * scale * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10
    cond = np.linalg.cond(a)
    raise SamplerError(f"Cholesky failed after jitter up to 1e-4*{scale:g}; condition number {cond:.3e}")


def empirical_bayes(data: GpData, alpha: float = 1.0) -> GpHyper:
    """Data-driven priors: E(y) = ybar and Var(y) split equally between mu, sigma2, tau2."""
    s2 = float(np.var(data.y, ddof=1))
    if not s2 > 0:
        raise ValidationError("response has zero sample variance")
    b = s2 / 3.0
    return GpHyper(a_sigma=2.0, b_sigma=b, a_mu=float(np.mean(data.y)), b_mu=b,
                   a_tau=2.0, b_tau=b, a_phi=0.1, b_phi=10.0, alpha=alpha)


def synth_gp_data(n: int = 100, sigma: float = 0.2, seed: int = 0) -> tuple[GpData, np.ndarray]:
    """x ~ U(-3, 3), y = f(x) + N(0, sigma^2).  Returns the data and true f(x)."""
    if n < 2:
        raise ValidationError("n must be at least 2")
    rng = make_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n)
    f = true_f(x)
    y = f + sigma * rng.standard_normal(n)
    return GpData(x, y), f


def initial_state(data: GpData, hyper: GpHyper) -> GpState:
    s2 = float(np.var(data.y, ddof=1))
    phi = 1.0 if hyper.a_phi < 1.0 < hyper.b_phi else 0.5 * (hyper.a_phi + hyper.b_phi)
    return GpState(theta=data.y.copy(), sigma2=s2 / 2, mu=float(data.y.mean()), tau2=s2 / 2, phi=phi)


def _chol_corr(data: GpData, phi: float, alpha: float) -> np.ndarray:
    return cholesky_jitter(power_exp_cov(data.x, 1.0, phi, alpha))


def theta_conditional(state: GpState, data: GpData, hyper: GpHyper) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of theta | rest, via A = H + sigma2 I (no inverse of H)."""
    h = power_exp_cov(data.x, state.tau2, state.phi, hyper.alpha)
    a = h + state.sigma2 * np.eye(data.n)
    ca = linalg.cho_factor(a, lower=True)
    gain = linalg.cho_solve(ca, h).T  # H A^{-1}
    mean = state.mu + gain @ (data.y - state.mu)
    cov = h - gain @ h
    return mean, 0.5 * (cov + cov.T)


def gibbs_step_theta(state: GpState, data: GpData, hyper: GpHyper, rng: np.random.Generator,
                     chol_c: np.ndarray | None = None) -> np.ndarray:
    """Exact draw of theta | sigma2, mu, tau2, phi, y.

    Uses the prior-perturbation identity: with f ~ N(mu 1, H) and
    e ~ N(0, sigma2 I), f + H (H + sigma2 I)^{-1} (y - f - e) has the
    full-conditional law of theta.
    """
    if chol_c is None:
        chol_c = _chol_corr(data, state.phi, hyper.alpha)
    n = data.n
    l_h = math.sqrt(state.tau2) * chol_c
    h = l_h @ l_h.T
    f = state.mu + l_h @ rng.standard_normal(n)
    e = math.sqrt(state.sigma2) * rng.standard_normal(n)
    ca = linalg.cho_factor(h + state.sigma2 * np.eye(n), lower=True)
    return f + h @ linalg.cho_solve(ca, data.y - f - e)


def sigma2_conditional(state: GpState, data: GpData, hyper: GpHyper) -> tuple[float, float]:
    """(shape, rate) of the inverse-gamma full conditional of sigma2."""
    rate = hyper.b_sigma + 0.5 * float(np.sum((data.y - state.theta) ** 2))
    return hyper.a_sigma + 0.5 * data.n, rate


def gibbs_step_sigma2(state: GpState, data: GpData, hyper: GpHyper, rng: np.random.Generator) -> float:
    shape, rate = sigma2_conditional(state, data, hyper)
    if not rate > 0:
        raise SamplerError(f"sigma2 conditional has non-positive rate {rate}")
    return rate / rng.gamma(shape)


def mu_conditional(state: GpState, data: GpData, hyper: GpHyper,
                   chol_c: np.ndarray | None = None) -> tuple[float, float]:
    """(mean, variance) of mu | theta, tau2, phi."""
    if chol_c is None:
        chol_c = _chol_corr(data, state.phi, hyper.alpha)
    ones = np.ones(data.n)
    hinv_1 = linalg.cho_solve((chol_c, True), ones) / state.tau2
    v = 1.0 / (1.0 / hyper.b_mu + hinv_1.sum())
    m = v * (hyper.a_mu / hyper.b_mu + hinv_1 @ state.theta)
    return float(m), float(v)


def gibbs_step_mu(state: GpState, data: GpData, hyper: GpHyper, rng: np.random.Generator,
                  chol_c: np.ndarray | None = None) -> float:
    m, v = mu_conditional(state, data, hyper, chol_c)
    return m + math.sqrt(v) * rng.standard_normal()


def tau2_conditional(state: GpState, data: GpData, hyper: GpHyper,
                     chol_c: np.ndarray | None = None) -> tuple[float, float]:
    """(shape, rate) of the inverse-gamma full conditional of tau2."""
    if chol_c is None:
        chol_c = _chol_corr(data, state.phi, hyper.alpha)
    z = linalg.solve_triangular(chol_c, state.theta - state.mu, lower=True)
    return hyper.a_tau + 0.5 * data.n, hyper.b_tau + 0.5 * float(z @ z)


def gibbs_step_tau2(state: GpState, data: GpData, hyper: GpHyper, rng: np.random.Generator,
                    chol_c: np.ndarray | None = None) -> float:
    shape, rate = tau2_conditional(state, data, hyper, chol_c)
    if not rate > 0:
        raise SamplerError(f"tau2 conditional has non-positive rate {rate}")
    return rate / rng.gamma(shape)


def _phi_log_density(phi: float, state: GpState, data: GpData, hyper: GpHyper):
    """log p(phi | theta, mu, tau2) up to a constant, with the Cholesky factor used."""
    if not hyper.a_phi < phi < hyper.b_phi:
        return -math.inf, None
    try:
        chol_c = _chol_corr(data, phi, hyper.alpha)
    except SamplerError:
        return -math.inf, None
    z = linalg.solve_triangular(chol_c, state.theta - state.mu, lower=True)
    # log|H^{-1}| = -n log tau2 - 2 sum log diag(L_C)
    logdet_hinv = -data.n * math.log(state.tau2) - 2.0 * float(np.sum(np.log(np.diag(chol_c))))
    return 0.5 * (logdet_hinv - float(z @ z) / state.tau2), chol_c


def phi_log_target(phi: float, state: GpState, data: GpData, hyper: GpHyper) -> float:
    return _phi_log_density(phi, state, data, hyper)[0]


def phi_kernel(hyper: GpHyper, step_size: float = 1.0, adaptive: bool = True) -> RwmKernel:
    return RwmKernel(BoundedTransform.logit_interval(hyper.a_phi, hyper.b_phi), step_size, adaptive)


def metropolis_step_phi(state: GpState, data: GpData, hyper: GpHyper, kernel: RwmKernel,
                        rng: np.random.Generator) -> float:
    """Random-walk Metropolis on eta = logit((phi - a_phi) / (b_phi - a_phi))."""
    return kernel.step(state.phi, lambda p: phi_log_target(p, state, data, hyper), rng)


def log_joint(state: GpState, data: GpData, hyper: GpHyper) -> float:
    """Unnormalised log posterior of (theta, sigma2, mu, tau2, phi), by dense algebra."""
    n = data.n
    if not (state.sigma2 > 0 and state.tau2 > 0 and hyper.a_phi < state.phi < hyper.b_phi):
        return -math.inf
    r = data.y - state.theta
    lp = -0.5 * n * math.log(2 * math.pi * state.sigma2) - 0.5 * float(r @ r) / state.sigma2
    h = power_exp_cov(data.x, state.tau2, state.phi, hyper.alpha)
    q = state.theta - state.mu
    _, logdet = np.linalg.slogdet(h)
    lp += -0.5 * n * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * float(q @ np.linalg.solve(h, q))
    lp += -0.5 * math.log(2 * math.pi * hyper.b_mu) - 0.5 * (state.mu - hyper.a_mu) ** 2 / hyper.b_mu
    for v, a, b in ((state.sigma2, hyper.a_sigma, hyper.b_sigma), (state.tau2, hyper.a_tau, hyper.b_tau)):
        lp += a * math.log(b) - math.lgamma(a) - (a + 1) * math.log(v) - b / v
    lp += -math.log(hyper.b_phi - hyper.a_phi)
    return lp


@dataclass
class GpFit:
    data: GpData
    hyper: GpHyper
    chain: ChainSpec
    sigma2: np.ndarray
    mu: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    theta: np.ndarray  # (retained, n)
    phi_acceptance: float
    phi_step: float
    band: dict = field(default_factory=dict)

    def scalar_traces(self) -> dict[str, np.ndarray]:
        return {"sigma2": self.sigma2, "mu": self.mu, "tau2": self.tau2, "phi": self.phi}


def posterior_band(x: np.ndarray, theta_draws: np.ndarray) -> dict[str, np.ndarray]:
    """Pointwise posterior mean and 95% quantile band of f at the sorted observed x."""
    order = np.argsort(x, kind="stable")
    draws = theta_draws[:, order]
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    return {"x": x[order], "f_mean": draws.mean(axis=0), "f_q025": lo, "f_q975": hi, "order": order}


def fit_gp(data: GpData, hyper: GpHyper | None = None, chain: ChainSpec | None = None,
           step_size: float = 1.0, init: GpState | None = None) -> GpFit:
    """Run the five-step sampler (theta, sigma2, mu, tau2, phi) and return traces plus band."""
    hyper = hyper or empirical_bayes(data)
    chain = chain or ChainSpec.from_retained(2500, burn_in=1000, thin=2)
    rng = chain.rng()
    state = replace(init) if init is not None else initial_state(data, hyper)
    kernel = phi_kernel(hyper, step_size)
    m = chain.n_retained
    out = {k: np.empty(m) for k in ("sigma2", "mu", "tau2", "phi")}
    theta_draws = np.empty((m, data.n))
    chol_c = _chol_corr(data, state.phi, hyper.alpha)
    for _, slot in chain_iterations(chain, [kernel]):
        state.theta = gibbs_step_theta(state, data, hyper, rng, chol_c)
        state.sigma2 = gibbs_step_sigma2(state, data, hyper, rng)
        state.mu = gibbs_step_mu(state, data, hyper, rng, chol_c)
        state.tau2 = gibbs_step_tau2(state, data, hyper, rng, chol_c)
        new_phi = metropolis_step_phi(state, data, hyper, kernel, rng)
        if new_phi != state.phi:
            state.phi = new_phi
            chol_c = _chol_corr(data, state.phi, hyper.alpha)
        if slot is not None:
            out["sigma2"][slot] = state.sigma2
            out["mu"][slot] = state.mu
            out["tau2"][slot] = state.tau2
            out["phi"][slot] = state.phi
            theta_draws[slot] = state.theta
    fit = GpFit(data, hyper, chain, out["sigma2"], out["mu"], out["tau2"], out["phi"], theta_draws,
                kernel.acceptance_rate, kernel.step_size)
    fit.band = posterior_band(data.x, theta_draws)
    return fit
