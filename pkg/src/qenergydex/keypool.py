"""Birth-death Markov chain analytics for the key pool.

The pool holds up to M units; replenishment is a Poisson birth process at
rate mu (no births at capacity) and consumption a Poisson death process at
rate lambda*k (no deaths when empty). The load factor is rho = lambda*k/mu.

For rho < 1 replenishment outpaces consumption and the stationary mass
concentrates near the full state:

    pi_s = rho^(M-s) (1 - rho) / (1 - rho^(M+1)),  s = 0..M

so the empty-pool probability pi_0 = rho^M (1 - rho) / (1 - rho^(M+1))
decays geometrically in M. The widely quoted geometric form pi_s
proportional to rho^s (mass at the EMPTY state for rho < 1) contradicts
the local balance recursion pi_s * lambda*k = pi_(s-1) * mu that defines
this chain; it is kept available behind ``as_printed=True`` purely for
comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import substream
from .stats import wilson_interval

__all__ = [
    "BirthDeathParams",
    "StationaryDistribution",
    "stationary_distribution",
    "stationary_oracle",
    "min_capacity",
    "exact_min_capacity",
    "simulate_pool",
    "PoolSimResult",
]


@dataclass(frozen=True)
class BirthDeathParams:
    """Chain rates: mu births/s, lambda arrivals/s consuming k units each."""

    mu: float
    lam: float
    k: float
    capacity: int

    def __post_init__(self):
        if self.mu <= 0 or self.lam <= 0 or self.k <= 0:
            raise ValueError("all rates must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    @property
    def rho(self) -> float:
        """Load factor: consumption-to-replenishment ratio."""
        return self.lam * self.k / self.mu

    @classmethod
    def from_rho(cls, rho: float, capacity: int, mu: float = 1.0) -> "BirthDeathParams":
        """Convenience constructor fixing mu and deriving the death rate."""
        if rho <= 0:
            raise ValueError("rho must be positive")
        return cls(mu=mu, lam=rho * mu, k=1.0, capacity=capacity)


@dataclass(frozen=True)
class StationaryDistribution:
    """Probabilities pi_s for s = 0..M; sums to 1."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if pi.min() < 0:
            raise ValueError("probabilities must be non-negative")
        if abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("distribution must sum to 1")

    @property
    def empty_probability(self) -> float:
        return float(self.pi[0])

    def __len__(self) -> int:
        return len(self.pi)


def stationary_distribution(
    p: BirthDeathParams, as_printed: bool = False
) -> StationaryDistribution:
    """Closed-form stationary distribution of the finite pool chain.

    Default orientation puts mass near the full state for rho < 1
    (pi_s proportional to rho^(M-s)); ``as_printed=True`` selects the
    mirrored geometric variant pi_s proportional to rho^s. rho == 1 uses
    the uniform limit 1/(M+1).
    """
    M = p.capacity
    rho = p.rho
    s = np.arange(M + 1, dtype=float)
    if abs(rho - 1.0) < 1e-14:
        pi = np.full(M + 1, 1.0 / (M + 1))
        return StationaryDistribution(pi=pi)
    exponent = s if as_printed else (M - s)
    # work in logs: rho^M underflows for large M at small rho
    logw = exponent * math.log(rho)
    logw -= logw.max()
    w = np.exp(logw)
    pi = w / w.sum()
    return StationaryDistribution(pi=pi)


def stationary_oracle(p: BirthDeathParams) -> StationaryDistribution:
    """Stationary distribution from the balance equations directly.

    Runs the tridiagonal forward recursion pi_s * (lambda k) = pi_(s-1) * mu
    in log space and normalizes numerically (log-sum-exp); makes no use of
    the closed-form normalizer.
    """
    M = p.capacity
    if M > 10 ** 5:
        raise ValueError("oracle capped at capacity 1e5")
    step = math.log(p.mu) - math.log(p.lam * p.k)
    logpi = np.arange(M + 1, dtype=float) * step
    logpi -= logpi.max()
    w = np.exp(logpi)
    return StationaryDistribution(pi=w / w.sum())


def min_capacity(rho: float, target_pi0: float) -> int:
    """Capacity lower bound ceil( ln(1/target) / ln(1/rho) - 1 ).

    Valid for rho < 1 only; at or above 1 the pool has no finite capacity
    meeting an empty-pool target (the chain drains almost surely).
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if not 0.0 < target_pi0 < 1.0:
        raise ValueError("target_pi0 must lie in (0, 1)")
    return math.ceil(math.log(1.0 / target_pi0) / math.log(1.0 / rho) - 1.0)


def _log_pi0(rho: float, M: int) -> float:
    # log pi_0 = M log rho + log(1-rho) - log(1 - rho^(M+1)), stable for rho<1
    return (
        M * math.log(rho)
        + math.log(1.0 - rho)
        - math.log1p(-math.exp((M + 1) * math.log(rho)))
    )


def exact_min_capacity(rho: float, target_pi0: float) -> int:
    """Smallest M with closed-form pi_0(M) <= target, found by bisection."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if not 0.0 < target_pi0 < 1.0:
        raise ValueError("target_pi0 must lie in (0, 1)")
    log_target = math.log(target_pi0)
    lo, hi = 1, 2
    while _log_pi0(rho, hi) > log_target:
        hi *= 2
        if hi > 10 ** 9:
            raise ValueError("target unreachable at this rho")
    while lo < hi:
        mid = (lo + hi) // 2
        if _log_pi0(rho, mid) <= log_target:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass(frozen=True)
class PoolSimResult:
    """Monte Carlo outcome: time-weighted occupancy and empty-state stats."""

    empty_fraction: float
    visits: np.ndarray          # time-weighted occupancy per state, sums to 1
    wilson_ci: tuple[float, float]
    events: int
    horizon_s: float


def simulate_pool(
    p: BirthDeathParams,
    horizon_s: float | None = None,
    seed: int = 0,
    max_events: int = 1_000_000,
    n_epochs: int = 10_000,
    initial_state: int | None = None,
) -> PoolSimResult:
    """Event-driven continuous-time simulation of the pool chain.

    Births occur at rate mu while below capacity, deaths at rate lambda*k
    while non-empty; inter-event times are exponential. ``empty_fraction``
    is the time-weighted occupancy of state 0. The Wilson 95% interval is
    computed over per-epoch empty indicators: the run splits into
    ``n_epochs`` equal-event-count epochs and each contributes the state
    observed at its boundary.

    Stops after ``max_events`` events or ``horizon_s`` simulated seconds,
    whichever comes first (horizon may be None for event-limited runs).
    """
    if horizon_s is not None and horizon_s <= 0:
        raise ValueError("horizon_s must be positive")
    rng = substream(seed, "keypool")
    M = p.capacity
    birth = p.mu
    death = p.lam * p.k
    state = M if initial_state is None else int(initial_state)
    if not 0 <= state <= M:
        raise ValueError("initial_state out of range")

    occupancy = np.zeros(M + 1)
    t = 0.0
    events = 0
    # presample uniforms in blocks; exponential times derived by inversion
    block = 65_536
    u_hold = np.empty(0)
    u_dir = np.empty(0)
    idx = 0

    epoch_stride = max(1, max_events // max(1, n_epochs))
    epoch_empties = 0
    epoch_count = 0

    limit_t = math.inf if horizon_s is None else horizon_s
    while events < max_events and t < limit_t:
        if idx >= len(u_hold):
            u_hold = rng.random(block)
            u_dir = rng.random(block)
            idx = 0
        if state == 0:
            rate = birth
            up = True
        elif state == M:
            rate = death
            up = False
        else:
            rate = birth + death
            up = u_dir[idx] < birth / rate
        dt = -math.log1p(-u_hold[idx]) / rate
        idx += 1
        if t + dt > limit_t:
            occupancy[state] += limit_t - t
            t = limit_t
            break
        occupancy[state] += dt
        t += dt
        state = state + 1 if up else state - 1
        events += 1
        if events % epoch_stride == 0:
            epoch_count += 1
            if state == 0:
                epoch_empties += 1

    total = occupancy.sum()
    if total <= 0:
        raise RuntimeError("simulation accumulated no time")
    visits = occupancy / total

    if epoch_count == 0:
        epoch_count = 1
        epoch_empties = 1 if state == 0 else 0
    ci = wilson_interval(epoch_empties, epoch_count)

    return PoolSimResult(
        empty_fraction=float(visits[0]),
        visits=visits,
        wilson_ci=ci,
        events=events,
        horizon_s=t,
    )
