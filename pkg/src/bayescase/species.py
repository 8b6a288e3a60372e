"""Species-sampling models: CRP and Pitman-Yor partitions, posterior samplers and
predictors for the number of new species in a further sample.

All probabilities are handled on the log scale.  The rising factorial is
``(a)_n = a (a+1) ... (a+n-1) = exp(lgamma(a+n) - lgamma(a))``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import betaln, gammaln, log_ndtr, logsumexp

from .mcmc import (BoundedTransform, ChainSpec, RwmKernel, SamplerError, ValidationError,
                   chain_iterations)

# Expressed-sequence-tag cluster sizes and the number of clusters of each size.
EST_SIZES = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 16, 23, 27)
EST_COUNTS = (1434, 253, 71, 33, 11, 6, 2, 3, 1, 2, 2, 1, 1, 1, 2, 1, 1)

STIRLING_MAX = 200
STICK_BREAKING_MAX_K = 9


def log_rising(a, n):
    """log (a)_n for a > 0, n >= 0."""
    return gammaln(np.asarray(a, dtype=float) + n) - gammaln(a)


@dataclass(frozen=True)
class AbundanceData:
    """Block sizes m_1..m_K of a partition of n observations."""

    m: tuple[int, ...]
    sizes: tuple[int, ...] | None = None
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        m = tuple(int(v) for v in self.m)
        if any(v < 1 for v in m):
            raise ValidationError("abundances must be positive integers")
        object.__setattr__(self, "m", m)

    @classmethod
    def from_frequencies(cls, sizes, counts) -> "AbundanceData":
        """Build from (size i, number of species observed exactly i times) pairs."""
        sizes = tuple(int(s) for s in sizes)
        counts = tuple(int(c) for c in counts)
        if len(sizes) != len(counts):
            raise ValidationError("sizes and counts differ in length")
        if len(set(sizes)) != len(sizes):
            raise ValidationError("duplicate size in frequency table")
        if any(s < 1 for s in sizes) or any(c < 0 for c in counts):
            raise ValidationError("sizes must be >= 1 and counts >= 0")
        m = tuple(s for s, c in zip(sizes, counts) for _ in range(c))
        return cls(m, sizes, counts)

    @classmethod
    def est(cls) -> "AbundanceData":
        return cls.from_frequencies(EST_SIZES, EST_COUNTS)

    @property
    def n(self) -> int:
        return sum(self.m)

    @property
    def K(self) -> int:
        return len(self.m)

    @functools.cached_property
    def _repeat_multiplicity(self) -> np.ndarray:
        # c[k-1] = number of blocks with more than k members, k = 1..max(m)-1
        if not self.m:
            return np.zeros(0)
        arr = np.asarray(self.m)
        return np.array([(arr > k).sum() for k in range(1, arr.max())], dtype=float)


def _as_data(m) -> AbundanceData:
    return m if isinstance(m, AbundanceData) else AbundanceData(tuple(m))


@dataclass(frozen=True)
class PypParams:
    sigma: float
    theta: float

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValidationError("sigma must lie in [0, 1)")
        if not self.theta + self.sigma > 0:
            raise ValidationError("theta must exceed -sigma")


def crp_log_eppf(m, theta: float) -> float:
    """log of theta^K Gamma(theta) / Gamma(theta + n) * prod Gamma(m_j)."""
    d = _as_data(m)
    if not theta > 0:
        raise ValidationError("theta must be positive")
    if d.n == 0:
        return 0.0
    mm = np.asarray(d.m, dtype=float)
    return float(d.K * math.log(theta) + gammaln(theta) - gammaln(theta + d.n) + gammaln(mm).sum())


def pyp_log_eppf(m, params: PypParams) -> float:
    """Pitman-Yor log EPPF as the product of predictive probabilities.

    Blocks are filled one after another.  The first observation has
    probability one; block j+1 is opened with weight theta + j sigma; the
    (k+1)-th member of a block joins with weight k - sigma; the i-th draw is
    normalised by theta + i - 1.
    """
    d = _as_data(m)
    if d.n <= 1:
        return 0.0
    s, th = params.sigma, params.theta
    new = np.log(th + s * np.arange(1, d.K)).sum()
    join = d._repeat_multiplicity @ np.log(np.arange(1, d._repeat_multiplicity.size + 1) - s)
    norm = np.log(th + np.arange(1, d.n)).sum()
    return float(new + join - norm)


def pyp_log_eppf_closed(m, params: PypParams) -> float:
    """Gamma-function form of :func:`pyp_log_eppf`:
    prod_{j<K}(theta + j sigma) Gamma(theta+1)/Gamma(theta+n) prod_j Gamma(m_j - sigma)/Gamma(1 - sigma).
    """
    d = _as_data(m)
    if d.n <= 1:
        return 0.0
    s, th = params.sigma, params.theta
    mm = np.asarray(d.m, dtype=float)
    return float(np.log(th + s * np.arange(1, d.K)).sum() + gammaln(th + 1) - gammaln(th + d.n)
                 + (gammaln(mm - s) - gammaln(1 - s)).sum())


def crp_ppf(m, theta: float) -> np.ndarray:
    """(m_1, ..., m_K, theta) / (theta + n): join block j, or open a new one (last entry)."""
    d = _as_data(m)
    if not theta > 0:
        raise ValidationError("theta must be positive")
    return np.append(np.asarray(d.m, dtype=float), theta) / (theta + d.n)


def pyp_ppf(m, params: PypParams) -> np.ndarray:
    d = _as_data(m)
    if d.n == 0:
        return np.ones(1)
    s, th = params.sigma, params.theta
    w = np.append(np.asarray(d.m, dtype=float) - s, th + s * d.K)
    return w / (th + d.n)


def expected_k_crp(n: int, theta: float) -> float:
    if n < 1 or not theta > 0:
        raise ValidationError("need n >= 1 and theta > 0")
    i = np.arange(1, n + 1)
    return float(np.sum(theta / (theta + i - 1)))


def expected_k_pyp(n: int, params: PypParams) -> float:
    """E[K^i] = E[K^{i-1}] + (theta + sigma E[K^{i-1}]) / (theta + i - 1), E[K^1] = 1."""
    if n < 1:
        raise ValidationError("need n >= 1")
    e = 1.0
    for i in range(2, n + 1):
        e += (params.theta + params.sigma * e) / (params.theta + i - 1)
    return e


@dataclass(frozen=True)
class StickBreakingSpec:
    """Stick-breaking weights z_l ~ Beta(a, b)."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValidationError("Beta parameters must be positive")

    def gamma_moment(self, x, y):
        """E[z^x (1 - z)^y] for z ~ Beta(a, b)."""
        return np.exp(betaln(self.a + x, self.b + y) - betaln(self.a, self.b))


def stick_breaking_eppf(m, spec: StickBreakingSpec) -> float:
    """EPPF of a stick-breaking prior as a sum over the K! orderings of the blocks.

    Each ordering contributes prod_k g(m_(k), r_(k+1)) / (1 - g(0, r_(k))),
    with g the Beta moment and r_(k) the total size of blocks k, k+1, ... in
    that order.  Returns a probability, not its log.
    """
    d = _as_data(m)
    if d.K > STICK_BREAKING_MAX_K:
        raise ValidationError(f"K={d.K} exceeds {STICK_BREAKING_MAX_K}; the permutation sum has K! terms")
    if d.K == 0:
        return 1.0
    total = 0.0
    for perm in itertools.permutations(d.m):
        tails = np.cumsum(perm[::-1])[::-1]  # r_(k) = sum_{j >= k}
        after = np.append(tails[1:], 0)
        terms = spec.gamma_moment(np.asarray(perm), after) / (1.0 - spec.gamma_moment(0, tails))
        total += float(np.prod(terms))
    return total


# Posterior sampling -----------------------------------------------------------


@dataclass(frozen=True)
class CrpPrior:
    a_theta: float = 1.0
    b_theta: float = 1.0

    def log_density(self, theta: float) -> float:
        return (self.a_theta - 1.0) * math.log(theta) - self.b_theta * theta


@dataclass(frozen=True)
class PypPrior:
    """sigma ~ Beta(a_sigma, b_sigma); theta ~ Normal(a_theta, b_theta^2) truncated to (-sigma, inf)."""

    a_sigma: float = 1.0
    b_sigma: float = 1.0
    a_theta: float = 723.0
    b_theta: float = 100.0

    def log_density(self, sigma: float, theta: float) -> float:
        if not (0 < sigma < 1) or not theta > -sigma:
            return -math.inf
        z = (theta - self.a_theta) / self.b_theta
        # the truncation normaliser depends on sigma
        lognorm = log_ndtr((self.a_theta + sigma) / self.b_theta)
        return ((self.a_sigma - 1) * math.log(sigma) + (self.b_sigma - 1) * math.log1p(-sigma)
                - 0.5 * z * z - float(lognorm))


@dataclass
class SpeciesFit:
    process: str
    theta: np.ndarray
    sigma: np.ndarray | None
    acceptance: dict[str, float]
    step_size: dict[str, float]

    def scalar_traces(self) -> dict[str, np.ndarray]:
        out = {"theta": self.theta}
        if self.sigma is not None:
            out["sigma"] = self.sigma
        return out


def _moment_theta(n: int, K: int, sigma: float = 0.0) -> float:
    """theta with E[K^n] = K (starting value)."""
    f = lambda th: expected_k_pyp(n, PypParams(sigma, th)) - K  # noqa: E731
    lo, hi = -sigma + 1e-6 if sigma > 0 else 1e-6, 1e7
    if K <= 1 or f(lo) >= 0:
        return max(1.0, lo + 1.0)
    if f(hi) <= 0:
        return hi
    return optimize.brentq(f, lo, hi, xtol=1e-6)


def crp_log_posterior(m, theta: float, prior: CrpPrior) -> float:
    if not theta > 0:
        return -math.inf
    return crp_log_eppf(m, theta) + prior.log_density(theta)


def pyp_log_posterior(m, sigma: float, theta: float, prior: PypPrior) -> float:
    lp = prior.log_density(sigma, theta)
    if not math.isfinite(lp):
        return -math.inf
    return pyp_log_eppf(m, PypParams(sigma, theta)) + lp


def fit_crp(m, prior: CrpPrior | None = None, chain: ChainSpec | None = None,
            kernel: RwmKernel | None = None, init: float | None = None) -> SpeciesFit:
    """Random-walk Metropolis on log theta."""
    d = _as_data(m)
    if d.n == 0:
        raise ValidationError("no observations")
    prior = prior or CrpPrior()
    chain = chain or ChainSpec(6000, 1000, 50)
    kernel = kernel or RwmKernel(BoundedTransform.log_lower(0.0), step_size=0.1)
    rng = chain.rng()
    theta = init if init is not None else _moment_theta(d.n, d.K)
    out = np.empty(chain.n_retained)
    target = lambda th: crp_log_posterior(d, th, prior)  # noqa: E731
    for _, slot in chain_iterations(chain, [kernel]):
        theta = kernel.step(theta, target, rng)
        if slot is not None:
            out[slot] = theta
    return SpeciesFit("crp", out, None, {"theta": kernel.acceptance_rate}, {"theta": kernel.step_size})


def fit_pyp(m, prior: PypPrior | None = None, chain: ChainSpec | None = None,
            step_sigma: float = 0.2, step_theta: float = 0.2, adaptive: bool = True,
            init: tuple[float, float] | None = None) -> SpeciesFit:
    """Two Metropolis blocks: sigma on the logit scale, then theta on psi = log(theta + sigma)."""
    d = _as_data(m)
    if d.n == 0:
        raise ValidationError("no observations")
    prior = prior or PypPrior()
    chain = chain or ChainSpec(6000, 1000, 50)
    k_sigma = RwmKernel(BoundedTransform.logit_interval(0.0, 1.0), step_size=step_sigma, adaptive=adaptive)
    k_theta = RwmKernel(BoundedTransform.log_shifted(0.5), step_size=step_theta, adaptive=adaptive)
    rng = chain.rng()
    if init is None:
        sigma = 0.5
        theta = _moment_theta(d.n, d.K, sigma)
    else:
        sigma, theta = init
    PypParams(sigma, theta)
    s_out = np.empty(chain.n_retained)
    t_out = np.empty(chain.n_retained)
    for _, slot in chain_iterations(chain, [k_sigma, k_theta]):
        sigma = k_sigma.step(sigma, lambda s: pyp_log_posterior(d, s, theta, prior), rng)
        k_theta.transform = BoundedTransform.log_shifted(sigma)
        theta = k_theta.step(theta, lambda th: pyp_log_posterior(d, sigma, th, prior), rng)
        if slot is not None:
            s_out[slot] = sigma
            t_out[slot] = theta
    return SpeciesFit("pyp", t_out, s_out,
                      {"sigma": k_sigma.acceptance_rate, "theta": k_theta.acceptance_rate},
                      {"sigma": k_sigma.step_size, "theta": k_theta.step_size})


# Prediction -------------------------------------------------------------------


@functools.lru_cache(maxsize=1)
def _stirling_table() -> np.ndarray:
    n = STIRLING_MAX
    t = np.full((n + 1, n + 1), -np.inf)
    t[0, 0] = 0.0
    for l in range(n):
        prev = t[l]
        with np.errstate(divide="ignore"):
            scaled = prev + math.log(l) if l > 0 else np.full(n + 1, -np.inf)
        shifted = np.concatenate([[-np.inf], prev[:-1]])
        t[l + 1] = np.logaddexp(scaled, shifted)
    t.setflags(write=False)
    return t


def stirling_first_signless_log(l: int, k: int) -> float:
    """log |s(l, k)| (-inf where the number is zero), 0 <= k <= l <= 200."""
    if not (0 <= k <= l <= STIRLING_MAX):
        raise ValidationError(f"need 0 <= k <= l <= {STIRLING_MAX}, got l={l}, k={k}")
    return float(_stirling_table()[l, k])


@dataclass
class PredictionDraws:
    """New-species counts in a further sample of ``n_star``.

    ``pmf`` is the pooled distribution of the count over 0..n_star: exact for
    the closed-form method, empirical for the simulation method.
    """

    n_star: int
    k_draws: np.ndarray
    pmf: np.ndarray
    method: str = ""

    def __post_init__(self):
        self.k_draws = np.asarray(self.k_draws, dtype=int)
        if self.k_draws.size and (self.k_draws.min() < 0 or self.k_draws.max() > self.n_star):
            raise ValidationError("new-species count outside [0, n_star]")

    @property
    def mean(self) -> float:
        return float(np.arange(self.n_star + 1) @ self.pmf)

    @property
    def sd(self) -> float:
        k = np.arange(self.n_star + 1)
        return float(math.sqrt(max(((k - self.mean) ** 2) @ self.pmf, 0.0)))

    def quantile(self, q: float) -> int:
        cdf = np.cumsum(self.pmf)
        return int(np.searchsorted(cdf, q - 1e-12))

    def summary(self) -> dict:
        return {"method": self.method, "n_star": self.n_star, "mean": self.mean, "sd": self.sd,
                "q025": self.quantile(0.025), "q50": self.quantile(0.5), "q975": self.quantile(0.975)}


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def simulate_new_species(n: int, K: int, n_star: int, theta, sigma, rng: np.random.Generator) -> np.ndarray:
    """Counts of new species when ``n_star`` further draws extend a partition
    with n observations in K blocks, one count per (theta, sigma) pair.

    Whether a draw opens a new block depends only on the running sample size
    and block count, so only those are tracked.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), theta.shape)
    k_cur = np.full(theta.shape, float(K))
    start = k_cur.copy()
    for i in range(n_star):
        p_new = (theta + sigma * k_cur) / (theta + n + i) if n + i > 0 else np.ones(theta.shape)
        k_cur += rng.random(theta.shape) < p_new
    return (k_cur - start).astype(int)


def predict_new_species_sim(m, theta, n_star: int, rng: np.random.Generator, sigma=None,
                            replicates: int = 1) -> PredictionDraws:
    """Forward simulation from the predictive rule, ``replicates`` runs per posterior draw."""
    d = _as_data(m)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size == 0:
        raise ValidationError("empty posterior trace")
    if n_star < 0 or replicates < 1:
        raise ValidationError("need n_star >= 0 and replicates >= 1")
    sig = np.zeros_like(theta) if sigma is None else np.asarray(sigma, dtype=float).ravel()
    if sig.shape != theta.shape:
        raise ValidationError("sigma and theta traces differ in length")
    k = simulate_new_species(d.n, d.K, n_star, np.repeat(theta, replicates), np.repeat(sig, replicates), rng)
    pmf = np.bincount(k, minlength=n_star + 1)[: n_star + 1] / k.size
    return PredictionDraws(n_star, k, pmf, "sim")


def new_species_log_pmf(n: int, n_star: int, theta) -> np.ndarray:
    """log P(K_new = k | theta) for k = 0..n_star under the CRP, rows indexed by theta.

    P(k) = theta^k / (theta + n)_{n_star} * sum_{l=k}^{n_star} C(n_star, l) |s(l, k)| (n)_{n_star - l}
    """
    if not 0 <= n_star <= STIRLING_MAX:
        raise ValidationError(f"n_star must be in [0, {STIRLING_MAX}]")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(theta <= 0):
        raise ValidationError("theta must be positive")
    l = np.arange(n_star + 1)
    log_binom = gammaln(n_star + 1) - gammaln(l + 1) - gammaln(n_star - l + 1)
    if n > 0:
        log_rise_n = log_rising(n, n_star - l)
    else:
        log_rise_n = np.where(l == n_star, 0.0, -np.inf)
    S = _stirling_table()[: n_star + 1, : n_star + 1]  # S[l, k]
    inner = logsumexp(log_binom[:, None] + log_rise_n[:, None] + S, axis=0)  # over l, per k
    k = np.arange(n_star + 1)
    return k[None, :] * np.log(theta)[:, None] - log_rising(theta, n + n_star)[:, None] \
        + log_rising(theta, n)[:, None] + inner[None, :]


def predict_new_species_closed(m, theta, n_star: int, rng: np.random.Generator) -> PredictionDraws:
    """Exact CRP law of the new-species count, one sampled count per theta draw."""
    d = _as_data(m)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size == 0:
        raise ValidationError("empty posterior trace")
    logp = new_species_log_pmf(d.n, n_star, theta)
    p = np.exp(logp)
    tot = p.sum(axis=1)
    if np.any(np.abs(tot - 1.0) > 1e-6):
        raise SamplerError(f"new-species distribution does not normalise (worst total {tot.max():.12g})")
    p /= tot[:, None]
    u = rng.random(theta.size)
    k = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), n_star)
    return PredictionDraws(n_star, k, p.mean(axis=0), "closed")
