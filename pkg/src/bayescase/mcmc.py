"""Chain-execution scaffold shared by every sampler in the package.

Random-walk Metropolis on transformed scales, burn-in/thinning bookkeeping,
effective sample sizes and posterior summaries.  Every stochastic routine in
the package takes an explicit ``numpy.random.Generator``; nothing touches
global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit, log_expit, logit

__all__ = [
    "ValidationError",
    "SamplerError",
    "ChainSpec",
    "BoundedTransform",
    "RwmKernel",
    "Trace",
    "PosteriorSummary",
    "make_rng",
    "transform_apply",
    "rwm_update",
    "chain_iterations",
    "effective_sample_size",
    "summarize",
    "split_rhat",
]


class ValidationError(ValueError):
    """Rejected input: a precondition on user-supplied data or settings failed."""


class SamplerError(RuntimeError):
    """Fatal numerical failure inside a sampler (upstream corruption)."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded with a 64-bit unsigned integer."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ChainSpec:
    """Chain control.

    ``total_iterations`` counts every sweep including burn-in.  After the
    first ``burn_in`` sweeps every ``thin``-th sweep is retained, giving
    ``floor((total_iterations - burn_in) / thin)`` stored draws.
    """

    total_iterations: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.total_iterations) < 1:
            raise ValidationError("total_iterations must be positive")
        if int(self.burn_in) < 0:
            raise ValidationError("burn_in must be non-negative")
        if int(self.thin) < 1:
            raise ValidationError("thin must be a positive integer")
        if self.burn_in >= self.total_iterations:
            raise ValidationError("burn_in must be smaller than total_iterations")
        if (self.total_iterations - self.burn_in) // self.thin < 1:
            raise ValidationError("chain retains no draws; increase total_iterations")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_retained(cls, retained: int, burn_in: int = 0, thin: int = 1, seed: int = 0) -> "ChainSpec":
        """Build from the number of kept draws: total = burn_in + retained * thin."""
        return cls(burn_in + retained * thin, burn_in, thin, seed)

    @property
    def n_retained(self) -> int:
        return (self.total_iterations - self.burn_in) // self.thin

    def rng(self) -> np.random.Generator:
        return make_rng(self.seed)


@dataclass(frozen=True)
class BoundedTransform:
    """Map between a constrained parameter and the real line.

    ``kind`` is one of ``identity``, ``log-lower`` (x > lower),
    ``logit-interval`` (lower < x < upper) or ``log-shifted`` (x > -offset,
    eta = log(x + offset)).
    """

    kind: str = "identity"
    lower: float = 0.0
    upper: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "log-lower", "logit-interval", "log-shifted"):
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if self.kind == "logit-interval" and not self.lower < self.upper:
            raise ValidationError("logit-interval needs lower < upper")

    @classmethod
    def identity(cls) -> "BoundedTransform":
        return cls("identity")

    @classmethod
    def log_lower(cls, lower: float = 0.0) -> "BoundedTransform":
        return cls("log-lower", lower=float(lower))

    @classmethod
    def logit_interval(cls, lower: float, upper: float) -> "BoundedTransform":
        return cls("logit-interval", lower=float(lower), upper=float(upper))

    @classmethod
    def log_shifted(cls, offset: float) -> "BoundedTransform":
        return cls("log-shifted", offset=float(offset))

    def in_domain(self, x: float) -> bool:
        if not math.isfinite(x):
            return False
        if self.kind == "log-lower":
            return x > self.lower
        if self.kind == "logit-interval":
            return self.lower < x < self.upper
        if self.kind == "log-shifted":
            return x + self.offset > 0.0
        return True

    def forward(self, x: float) -> float:
        if not self.in_domain(x):
            raise ValidationError(f"{x!r} is outside the open domain of the {self.kind} transform")
        if self.kind == "log-lower":
            return math.log(x - self.lower)
        if self.kind == "logit-interval":
            return float(logit((x - self.lower) / (self.upper - self.lower)))
        if self.kind == "log-shifted":
            return math.log(x + self.offset)
        return float(x)

    def inverse(self, eta: float) -> float:
        if self.kind == "log-lower":
            return self.lower + math.exp(eta)
        if self.kind == "logit-interval":
            return self.lower + (self.upper - self.lower) * float(expit(eta))
        if self.kind == "log-shifted":
            return math.exp(eta) - self.offset
        return float(eta)

    def log_jacobian(self, eta: float) -> float:
        """log |dx/deta| evaluated at eta."""
        if self.kind in ("log-lower", "log-shifted"):
            return float(eta)
        if self.kind == "logit-interval":
            return math.log(self.upper - self.lower) + float(log_expit(eta) + log_expit(-eta))
        return 0.0


def transform_apply(t: BoundedTransform, x: float) -> tuple[float, float]:
    """Return ``(eta, log_jacobian_of_inverse_at_eta)`` for x in the domain of t."""
    eta = t.forward(x)
    return eta, t.log_jacobian(eta)


@dataclass
class RwmKernel:
    """Gaussian random-walk Metropolis on the transformed scale.

    ``step_size`` is the proposal standard deviation.  While ``adaptive`` and
    not yet frozen the step is multiplied by 1.1 whenever the acceptance rate
    over the last ``adapt_interval`` proposals exceeds 0.5 and by 0.9 when it
    falls below 0.3.  :meth:`freeze` stops adaptation and resets the counters
    so the reported rate covers post burn-in proposals only.
    """

    transform: BoundedTransform = field(default_factory=BoundedTransform.identity)
    step_size: float = 1.0
    adaptive: bool = True
    adapt_interval: int = 50
    accept_count: int = 0
    propose_count: int = 0
    frozen: bool = False
    _window_accept: int = field(default=0, repr=False)
    _window_propose: int = field(default=0, repr=False)

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValidationError("step_size must be positive")

    @property
    def acceptance_rate(self) -> float:
        if self.propose_count == 0:
            return float("nan")
        return self.accept_count / self.propose_count

    def freeze(self) -> None:
        self.frozen = True
        self.accept_count = 0
        self.propose_count = 0

    def _record(self, accepted: bool) -> None:
        self.propose_count += 1
        self.accept_count += int(accepted)
        if not self.adaptive or self.frozen:
            return
        self._window_propose += 1
        self._window_accept += int(accepted)
        if self._window_propose >= self.adapt_interval:
            rate = self._window_accept / self._window_propose
            if rate > 0.5:
                self.step_size *= 1.1
            elif rate < 0.3:
                self.step_size *= 0.9
            self._window_accept = 0
            self._window_propose = 0

    def log_target_eta(self, log_target: Callable[[float], float], eta: float) -> float:
        x = self.transform.inverse(eta)
        if not self.transform.in_domain(x):
            return -math.inf
        return log_target(x) + self.transform.log_jacobian(eta)

    def step(self, current: float, log_target: Callable[[float], float], rng: np.random.Generator) -> float:
        eta = self.transform.forward(current)
        lp_cur = self.log_target_eta(log_target, eta)
        if not math.isfinite(lp_cur):
            raise SamplerError(f"log target is not finite at the current value {current!r}")
        eta_prop = eta + self.step_size * rng.standard_normal()
        lp_prop = self.log_target_eta(log_target, eta_prop)
        accepted = bool(np.isfinite(lp_prop)) and math.log(rng.random()) < lp_prop - lp_cur
        self._record(accepted)
        return self.transform.inverse(eta_prop) if accepted else current


def rwm_update(kernel: RwmKernel, current: float, log_target: Callable[[float], float],
               rng: np.random.Generator) -> float:
    """One Metropolis update of ``current`` under ``log_target`` (natural scale)."""
    return kernel.step(current, log_target, rng)


def chain_iterations(spec: ChainSpec, kernels: Sequence[RwmKernel] = ()) -> Iterator[tuple[int, int | None]]:
    """Yield ``(iteration, slot)`` for iterations 1..total.

    ``slot`` is the storage index of a retained draw or None.  Kernels are
    frozen once burn-in completes.
    """
    for it in range(1, spec.total_iterations + 1):
        if it == spec.burn_in + 1:
            for k in kernels:
                k.freeze()
        slot = None
        if it > spec.burn_in and (it - spec.burn_in) % spec.thin == 0:
            slot = (it - spec.burn_in) // spec.thin - 1
        yield it, slot


@dataclass
class Trace:
    name: str
    draws: np.ndarray

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float).ravel()
        if not np.all(np.isfinite(self.draws)):
            raise ValidationError(f"trace {self.name!r} contains non-finite draws")

    def __len__(self) -> int:
        return self.draws.size


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    ess: float
    n: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "q025": self.q025, "q50": self.q50,
                "q975": self.q975, "ess": self.ess, "n": self.n}


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(trace) -> float:
    """Effective sample size by Geyer's initial monotone positive sequence.

    A constant trace has no autocorrelation to estimate; its ESS is defined as
    the number of draws.  The estimate is capped at the number of draws.
    """
    x = np.asarray(trace.draws if isinstance(trace, Trace) else trace, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValidationError("effective_sample_size needs at least 10 draws")
    if np.ptp(x) == 0.0 or np.var(x) <= 1e-300:
        return float(n)
    rho = _autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    total = 0.0
    prev = math.inf
    for g in pairs:
        if g <= 0.0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    if tau <= 0.0:
        return float(n)
    return float(min(n / tau, n))


def summarize(trace) -> PosteriorSummary:
    """Mean, sd (n-1 divisor), 2.5/50/97.5% quantiles (linear interpolation) and ESS."""
    x = np.asarray(trace.draws if isinstance(trace, Trace) else trace, dtype=float).ravel()
    if x.size < 2:
        raise ValidationError("summarize needs at least 2 draws")
    q025, q50, q975 = np.quantile(x, [0.025, 0.5, 0.975], method="linear")
    ess = effective_sample_size(x) if x.size >= 10 else float(x.size)
    return PosteriorSummary(float(x.mean()), float(x.std(ddof=1)), float(q025), float(q50),
                            float(q975), ess, int(x.size))


def split_rhat(chains: Sequence[np.ndarray]) -> float:
    """Split-chain potential scale reduction (diagnostic only, never a stop rule)."""
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float).ravel()
        h = c.size // 2
        if h < 2:
            raise ValidationError("split_rhat needs at least 4 draws per chain")
        halves += [c[:h], c[c.size - h:]]
    m = np.vstack(halves)
    n = m.shape[1]
    within = m.var(axis=1, ddof=1).mean()
    between = n * m.mean(axis=1).var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    var_plus = (n - 1) / n * within + between / n
    return float(math.sqrt(var_plus / within))
