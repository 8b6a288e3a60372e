"""Autoregressive time-series models.

``ar_fit_direct`` draws from the conjugate AR(p) posterior under the reference
prior p(phi, v) ~ 1/v.  ``fit_outlier_dlm`` fits the additive-outlier model

    y_t = gamma_t alpha_t + x_t + eps_t,   gamma_t ~ Ber(q), alpha_t ~ N(0, v_a), eps_t ~ N(0, v_0)
    x_t = phi_1 x_{t-1} + ... + phi_p x_{t-p} + N(0, omega)

by Gibbs sampling, with the AR states drawn by forward filtering backward
sampling on the companion-form DLM (theta_t = (x_t, ..., x_{t-p+1})).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _ffbs_kernels as _kernels
from .mcmc import ChainSpec, SamplerError, ValidationError, chain_iterations, make_rng

_LOG_2PI = math.log(2 * math.pi)


def lagged_design(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (F, target) with F of shape (p, T-p); column t holds (y_{t-1}, ..., y_{t-p})."""
    y = np.asarray(y, dtype=float)
    T = y.size
    F = np.vstack([y[p - j - 1:T - j - 1] for j in range(p)])
    return F, y[p:]


@dataclass
class ArFit:
    p: int
    phi_hat_mle: np.ndarray
    v_hat_mle: float
    rss: float
    n: int
    phi_draws: np.ndarray  # (n_draws, p)
    v_draws: np.ndarray

    @property
    def posterior_cov_scale(self) -> float:
        return self.rss / (self.n - self.p)


def ar_fit_direct(y, p: int, n_draws: int = 25000, seed: int | np.random.Generator = 0) -> ArFit:
    """Direct Monte Carlo from p(phi, v | y) for an AR(p) with reference prior.

    v ~ IG((n - p)/2, RSS/2) with n = T - p, then phi | v ~ N_p(phi_hat, v (F F')^{-1}).
    """
    y = np.asarray(y, dtype=float).ravel()
    if p < 1:
        raise ValidationError("AR order must be at least 1")
    if y.size <= 2 * p:
        raise ValidationError(f"need T > 2p observations, got T={y.size}, p={p}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("series contains non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    F, target = lagged_design(y, p)
    n = target.size
    ff = F @ F.T
    rank = np.linalg.matrix_rank(ff)
    if rank < p:
        raise SamplerError(f"lagged design is singular: rank {rank} < p={p}")
    cf = linalg.cho_factor(ff, lower=True)
    phi_hat = linalg.cho_solve(cf, F @ target)
    resid = target - F.T @ phi_hat
    rss = float(resid @ resid)
    if not rss > 0:
        raise ValidationError("residual sum of squares is zero; AR fit is degenerate")
    v = (rss / 2.0) / rng.gamma((n - p) / 2.0, size=n_draws)
    chol_inv = linalg.solve_triangular(cf[0], np.eye(p), lower=True).T  # L^{-T}: cov (FF')^{-1}
    z = rng.standard_normal((n_draws, p))
    phi = phi_hat + np.sqrt(v)[:, None] * (z @ chol_inv.T)
    return ArFit(p, phi_hat, rss / n, rss, n, phi, v)


def build_companion(phi) -> np.ndarray:
    """Companion matrix: first row phi, identity on the subdiagonal."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    p = phi.size
    if p < 1:
        raise ValidationError("need at least one AR coefficient")
    g = np.zeros((p, p))
    g[0] = phi
    g[np.arange(1, p), np.arange(p - 1)] = 1.0
    return g


@dataclass(frozen=True)
class OutlierDlmSpec:
    p: int = 3
    outlier_prob: float = 0.2
    obs_var_base: float = 0.01
    outlier_var_add: float = 0.1
    a_phi: float = 0.0
    b_phi: float = 0.25
    a_omega: float = 2.0
    b_omega: float | None = None  # None: use the AR(p) MLE of the innovation variance

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError("p must be at least 1")
        if not 0 <= self.outlier_prob < 1:
            raise ValidationError("outlier_prob must lie in [0, 1)")
        for name in ("obs_var_base", "outlier_var_add", "b_phi", "a_omega"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.b_omega is not None and not self.b_omega > 0:
            raise ValidationError("b_omega must be positive")

    def obs_var(self, gamma) -> np.ndarray:
        return self.obs_var_base + self.outlier_var_add * np.asarray(gamma, dtype=float)


@dataclass
class DlmState:
    gamma: np.ndarray  # (T,) in {0, 1}
    alpha: np.ndarray  # (T,)
    theta: np.ndarray  # (T+1, p); theta[t, 0] = x_t
    phi: np.ndarray
    omega: float


@dataclass
class KalmanCache:
    """Filter moments; index 0 of ``m``/``C`` holds the prior (m_0, C_0), a/R/f/Q/e start at t=1."""

    a: np.ndarray  # (T+1, p)
    R: np.ndarray  # (T+1, p, p)
    m: np.ndarray
    C: np.ndarray
    f: np.ndarray  # (T+1,)
    Q: np.ndarray
    e: np.ndarray
    G: np.ndarray

    @property
    def T(self) -> int:
        return self.m.shape[0] - 1

    def log_likelihood(self) -> float:
        q, e = self.Q[1:], self.e[1:]
        return float(-0.5 * np.sum(_LOG_2PI + np.log(q) + e**2 / q))


def alpha_conditional(theta_t1, gamma_t, y_t, spec: OutlierDlmSpec = OutlierDlmSpec()):
    """Mean and variance of alpha_t | x_t, gamma_t, y_t (vectorised)."""
    gamma_t = np.asarray(gamma_t, dtype=float)
    v = 1.0 / (1.0 / spec.outlier_var_add + gamma_t / spec.obs_var_base)
    m = v * gamma_t * (np.asarray(y_t) - np.asarray(theta_t1)) / spec.obs_var_base
    return m, v


def sample_alpha(theta_t1, gamma_t, y_t, rng: np.random.Generator, spec: OutlierDlmSpec = OutlierDlmSpec()):
    m, v = alpha_conditional(theta_t1, gamma_t, y_t, spec)
    return m + np.sqrt(v) * rng.standard_normal(np.shape(m))


def gamma_log_odds(theta_t1, y_t, spec: OutlierDlmSpec = OutlierDlmSpec()):
    """log Pr(gamma_t = 1 | x_t, y_t) / Pr(gamma_t = 0 | x_t, y_t), alpha integrated out."""
    r2 = (np.asarray(y_t, dtype=float) - np.asarray(theta_t1, dtype=float)) ** 2
    v0 = spec.obs_var_base
    v1 = v0 + spec.outlier_var_add
    q = spec.outlier_prob
    prior = math.log(q / (1 - q)) if q > 0 else -math.inf
    return prior + 0.5 * math.log(v0 / v1) - 0.5 * r2 * (1 / v1 - 1 / v0)


def sample_gamma(theta_t1, y_t, rng: np.random.Generator, spec: OutlierDlmSpec = OutlierDlmSpec()):
    lo = gamma_log_odds(theta_t1, y_t, spec)
    p = 1.0 / (1.0 + np.exp(-np.asarray(lo)))  # saturates cleanly at 0/1
    return (rng.random(np.shape(p)) < p).astype(np.int8)


def phi_conditional(theta: np.ndarray, omega: float, spec: OutlierDlmSpec):
    """Mean and covariance of phi | theta_{0:T}, omega."""
    p = theta.shape[1]
    prev = theta[:-1]
    cur = theta[1:, 0]
    prec = np.eye(p) / spec.b_phi + prev.T @ prev / omega
    rhs = spec.a_phi / spec.b_phi * np.ones(p) + prev.T @ cur / omega
    try:
        cf = linalg.cho_factor(prec, lower=True)
    except linalg.LinAlgError as exc:
        raise SamplerError("phi full-conditional precision is not positive definite") from exc
    v = linalg.cho_solve(cf, np.eye(p))
    return linalg.cho_solve(cf, rhs), 0.5 * (v + v.T)


def sample_phi_dlm(theta: np.ndarray, omega: float, spec: OutlierDlmSpec, rng: np.random.Generator):
    m, v = phi_conditional(theta, omega, spec)
    return m + np.linalg.cholesky(v) @ rng.standard_normal(m.size)


def omega_conditional(theta: np.ndarray, phi, spec: OutlierDlmSpec, b_omega: float | None = None):
    """(shape, rate) of omega | theta_{0:T}, phi; residual x_t - phi' theta_{t-1}."""
    b = spec.b_omega if b_omega is None else b_omega
    resid = theta[1:, 0] - theta[:-1] @ np.asarray(phi, dtype=float)
    T = resid.size
    return spec.a_omega + 0.5 * T, b + 0.5 * float(resid @ resid)


def sample_omega(theta: np.ndarray, phi, spec: OutlierDlmSpec, rng: np.random.Generator,
                 b_omega: float | None = None) -> float:
    shape, rate = omega_conditional(theta, phi, spec, b_omega)
    return rate / rng.gamma(shape)


def kalman_forward(y, obs_var, phi, omega: float, m0=None, C0=None) -> KalmanCache:
    """Forward filter for y_t = F' theta_t + N(0, V_t), theta_t = G theta_{t-1} + N(0, diag(omega, 0..)).

    F = (1, 0, ..., 0) and G is the companion matrix of ``phi``.
    """
    y = np.ascontiguousarray(y, dtype=float).ravel()
    T = y.size
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    p = phi.size
    V = np.ascontiguousarray(np.broadcast_to(np.asarray(obs_var, dtype=float), (T,)))
    m0 = np.zeros(p) if m0 is None else np.asarray(m0, dtype=float).reshape(p)
    C0 = np.eye(p) if C0 is None else np.asarray(C0, dtype=float).reshape(p, p)
    a, R, m, C, f, Q, e, bad = _kernels.forward(y, V, phi, float(omega), m0, C0)
    if bad:
        raise SamplerError(f"one-step forecast variance Q_{bad} = {Q[bad]} is not positive")
    return KalmanCache(a, R, m, C, f, Q, e, build_companion(phi))


psd_cholesky = _kernels.psd_cholesky


def _smoothing_gain(C: np.ndarray, G: np.ndarray, R_next: np.ndarray) -> np.ndarray:
    """B_t = C_t G' R_{t+1}^{-1}; pseudo-inverse (with a warning) if R_{t+1} is singular."""
    cg = C @ G.T
    try:
        cf = linalg.cho_factor(R_next, lower=True, check_finite=False)
        if np.min(np.diag(cf[0])) ** 2 <= 1e-14 * max(np.max(np.diag(R_next)), 1e-300):
            raise linalg.LinAlgError("nearly singular")
        return linalg.cho_solve(cf, cg.T, check_finite=False).T
    except linalg.LinAlgError:
        warnings.warn("R_{t+1} is singular; using a pseudo-inverse in backward sampling", RuntimeWarning,
                      stacklevel=3)
        return cg @ np.linalg.pinv(R_next, hermitian=True)


def backward_moments(cache: KalmanCache, t: int, theta_next: np.ndarray):
    """Mean and covariance of theta_t | theta_{t+1}, y_{1:t}."""
    B = _smoothing_gain(cache.C[t], cache.G, cache.R[t + 1])
    mean = cache.m[t] + B @ (theta_next - cache.a[t + 1])
    cov = cache.C[t] - B @ cache.R[t + 1] @ B.T
    return mean, 0.5 * (cov + cov.T)


def backward_sample_reference(cache: KalmanCache, z: np.ndarray) -> np.ndarray:
    """Plain numpy backward pass driven by given standard normals ``z`` of shape (T+1, p)."""
    T = cache.T
    theta = np.empty_like(cache.m)
    theta[T] = cache.m[T] + psd_cholesky(cache.C[T]) @ z[T]
    for t in range(T - 1, -1, -1):
        mean, cov = backward_moments(cache, t, theta[t + 1])
        theta[t] = mean + psd_cholesky(cov) @ z[t]
    return theta


def backward_sample(cache: KalmanCache, rng: np.random.Generator) -> np.ndarray:
    """Draw theta_{0:T} jointly from p(theta_{0:T} | y_{1:T}).

    theta_T ~ N(m_T, C_T), then theta_t ~ N(m_t + B_t (theta_{t+1} - a_{t+1}),
    C_t - B_t R_{t+1} B_t') for t = T-1, ..., 0.  Degenerate (PSD) covariances
    are factored by a pivot-skipping Cholesky.
    """
    z = rng.standard_normal(cache.m.shape)
    theta, n_singular = _kernels.backward(cache.a, cache.R, cache.m, cache.C, cache.G, z)
    if n_singular:
        warnings.warn(f"R_{{t+1}} singular at {n_singular} steps; used a pseudo-inverse in backward sampling",
                      RuntimeWarning, stacklevel=2)
    return theta


def ffbs(y, obs_var, phi, omega, rng, m0=None, C0=None) -> np.ndarray:
    return backward_sample(kalman_forward(y, obs_var, phi, omega, m0, C0), rng)


def log_joint(state: DlmState, y, spec: OutlierDlmSpec, b_omega: float | None = None,
              m0=None, C0=None, marginalize_alpha: bool = False) -> float:
    """Unnormalised log posterior, written directly from the generative model.

    With ``marginalize_alpha`` the outlier magnitudes are integrated out,
    giving y_t | gamma_t, x_t ~ N(x_t, v_0 + gamma_t v_a).
    """
    y = np.asarray(y, dtype=float)
    b_om = spec.b_omega if b_omega is None else b_omega
    x = state.theta[1:, 0]
    g = state.gamma.astype(float)
    lp = 0.0
    if marginalize_alpha:
        v = spec.obs_var_base + g * spec.outlier_var_add
        lp += float(np.sum(-0.5 * np.log(2 * np.pi * v) - 0.5 * (y - x) ** 2 / v))
    else:
        v0 = spec.obs_var_base
        r = y - x - g * state.alpha
        lp += float(np.sum(-0.5 * np.log(2 * np.pi * v0) - 0.5 * r**2 / v0))
        va = spec.outlier_var_add
        lp += float(np.sum(-0.5 * np.log(2 * np.pi * va) - 0.5 * state.alpha**2 / va))
    q = spec.outlier_prob
    n1 = float(g.sum())
    lp += n1 * (math.log(q) if q > 0 else (-math.inf if n1 > 0 else 0.0)) + (g.size - n1) * math.log(1 - q)
    # AR state evolution, built without the companion matrix
    p = state.theta.shape[1]
    xs = np.concatenate([state.theta[0, ::-1], x])  # x_{1-p}, ..., x_0, x_1, ..., x_T
    for t in range(1, x.size + 1):
        lags = xs[p - 1 + t - 1::-1][:p]
        mu_t = float(np.dot(state.phi, lags))
        lp += -0.5 * math.log(2 * math.pi * state.omega) - 0.5 * (xs[p - 1 + t] - mu_t) ** 2 / state.omega
    m0 = np.zeros(p) if m0 is None else np.asarray(m0, dtype=float)
    C0 = np.eye(p) if C0 is None else np.asarray(C0, dtype=float)
    d = state.theta[0] - m0
    _, logdet = np.linalg.slogdet(C0)
    lp += -0.5 * (p * _LOG_2PI + logdet + d @ np.linalg.solve(C0, d))
    lp += float(np.sum(-0.5 * np.log(2 * np.pi * spec.b_phi) - 0.5 * (state.phi - spec.a_phi) ** 2 / spec.b_phi))
    a = spec.a_omega
    lp += a * math.log(b_om) - math.lgamma(a) - (a + 1) * math.log(state.omega) - b_om / state.omega
    return lp


@dataclass
class DlmFit:
    spec: OutlierDlmSpec
    b_omega: float
    chain: ChainSpec
    phi: np.ndarray  # (retained, p)
    omega: np.ndarray
    prob_outlier: np.ndarray  # (T,)
    alpha_mean: np.ndarray
    x_mean: np.ndarray
    fitted_mean: np.ndarray

    def flagged(self, threshold: float = 0.5) -> np.ndarray:
        """1-based time indices with Pr(gamma_t = 1 | y) above ``threshold``."""
        return np.flatnonzero(self.prob_outlier > threshold) + 1

    def scalar_traces(self) -> dict[str, np.ndarray]:
        out = {f"phi{j + 1}": self.phi[:, j] for j in range(self.phi.shape[1])}
        out["omega"] = self.omega
        return out


def fit_outlier_dlm(y, spec: OutlierDlmSpec = OutlierDlmSpec(), chain: ChainSpec | None = None,
                    m0=None, C0=None) -> DlmFit:
    """Gibbs sampler: alpha, gamma, phi, omega, then theta_{0:T} by FFBS, each sweep."""
    y = np.asarray(y, dtype=float).ravel()
    T = y.size
    if T < 10:
        raise ValidationError("outlier DLM needs at least 10 observations")
    if not np.all(np.isfinite(y)):
        raise ValidationError("series contains non-finite values")
    chain = chain or ChainSpec(3000, 1000, 1)
    rng = chain.rng()
    p = spec.p
    ar = ar_fit_direct(y, p, n_draws=1, seed=rng)
    b_omega = spec.b_omega if spec.b_omega is not None else ar.v_hat_mle
    state = DlmState(gamma=np.zeros(T, dtype=np.int8), alpha=np.zeros(T), theta=np.zeros((T + 1, p)),
                     phi=ar.phi_hat_mle.copy(), omega=ar.v_hat_mle)
    state.theta = ffbs(y, spec.obs_var(state.gamma), state.phi, state.omega, rng, m0, C0)

    nk = chain.n_retained
    phi_tr = np.empty((nk, p))
    omega_tr = np.empty(nk)
    sums = {k: np.zeros(T) for k in ("gamma", "alpha", "x", "fitted")}
    for _, slot in chain_iterations(chain):
        x = state.theta[1:, 0]
        state.alpha = sample_alpha(x, state.gamma, y, rng, spec)
        alpha_now = state.alpha
        state.gamma = sample_gamma(x, y, rng, spec)
        state.phi = sample_phi_dlm(state.theta, state.omega, spec, rng)
        state.omega = sample_omega(state.theta, state.phi, spec, rng, b_omega)
        state.theta = ffbs(y, spec.obs_var(state.gamma), state.phi, state.omega, rng, m0, C0)
        if slot is not None:
            x = state.theta[1:, 0]
            phi_tr[slot] = state.phi
            omega_tr[slot] = state.omega
            sums["gamma"] += state.gamma
            sums["alpha"] += alpha_now
            sums["x"] += x
            # E(gamma alpha + x | gamma, x, y) = gamma * E(alpha | gamma = 1, x, y) + x
            sums["fitted"] += state.gamma * alpha_conditional(x, state.gamma, y, spec)[0] + x
    return DlmFit(spec, b_omega, chain, phi_tr, omega_tr, sums["gamma"] / nk, sums["alpha"] / nk,
                  sums["x"] / nk, sums["fitted"] / nk)


def synth_outlier_series(T: int = 600, phi=(0.47, 0.13, 0.13), omega: float = 0.0017,
                         n_outliers: int = 10, min_magnitude: float = 0.25,
                         spec: OutlierDlmSpec = OutlierDlmSpec(), seed: int = 0, burn: int = 200):
    """AR(p) latent path plus N(0, v_0) noise and planted additive outliers.

    Outlier sizes are N(0, v_a) conditioned on |alpha| > ``min_magnitude``;
    positions are distinct and drawn uniformly.  Returns (y, x, positions, sizes)
    with 1-based positions.
    """
    rng = make_rng(seed)
    phi = np.asarray(phi, dtype=float)
    p = phi.size
    x = np.zeros(T + burn + p)
    eta = math.sqrt(omega) * rng.standard_normal(x.size)
    for t in range(p, x.size):
        x[t] = phi @ x[t - p:t][::-1] + eta[t]
    x = x[-T:]
    y = x + math.sqrt(spec.obs_var_base) * rng.standard_normal(T)
    pos = np.sort(rng.choice(np.arange(p, T), size=n_outliers, replace=False))
    sizes = np.empty(n_outliers)
    for k in range(n_outliers):
        while True:
            a = math.sqrt(spec.outlier_var_add) * rng.standard_normal()
            if abs(a) > min_magnitude:
                sizes[k] = a
                break
    y[pos] += sizes
    return y, x, pos + 1, sizes


def synth_ar_series(T: int = 600, phi=(0.3, 0.1, 0.2), v: float = 0.01, seed: int = 0, burn: int = 200):
    rng = make_rng(seed)
    phi = np.asarray(phi, dtype=float)
    p = phi.size
    y = np.zeros(T + burn + p)
    e = math.sqrt(v) * rng.standard_normal(y.size)
    for t in range(p, y.size):
        y[t] = phi @ y[t - p:t][::-1] + e[t]
    return y[-T:]
