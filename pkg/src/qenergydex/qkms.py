"""Cloud key-management service: token-bucket pool, rent/retire/audit,
replica reconciliation, and the adaptive output-rate controller.

The pool is a token bucket: balance B accrues at the generation rate and
is spent by Rent(n) calls, clamped to [0, capacity]. Rentals fail without
side effects when n exceeds the balance. Issued keys carry a ttl (default
30 s) and move through active -> retired/expired exactly once.

Replicas are single-writer state machines; the only cross-replica
operation is the min-merge of per-key issuance watermarks, which is
commutative, associative, and idempotent, so reconciliation is safe under
arbitrary interleavings. Key identifiers embed the replica index in their
top byte, making cross-replica collisions structurally impossible.

The rate controller compares two emission strategies against the
per-millisecond secure capacity given by the leftover-hash length of the
interval's raw bits:

- ``fixed``: requests a constant rate regardless of channel state;
- ``rate_adapt``: follows the stochastic-approximation update
  R <- max(0.1 R_max, (1 - gamma_t q_t) R) with gamma_t = gamma_0 / t,
  and additionally bounds each request by the secure capacity computed
  from the same QBER measurement, modelling a service that refuses to
  emit bits it cannot back with extractable entropy.

Requests above capacity are counted as cap-exceed time and the excess is
dropped; the adaptive strategy's preemptive bound keeps its excess at or
near zero while the fixed strategy pays for every channel excursion.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .entropy import (
    DEFAULT_EPSILON,
    QberTrace,
    binary_entropy,
    chi_square_miss_probability,
    extractable_length_vec,
)
from .rng import substream

__all__ = [
    "KeyPoolState",
    "KeyRecord",
    "RateAdaptState",
    "AuditReport",
    "InsufficientEntropy",
    "UnknownKey",
    "AlreadyRetired",
    "step_bucket",
    "crdt_merge",
    "rate_adapt_step",
    "rate_adapt_fixed_point",
    "rate_adapt_mse_bound",
    "run_rate_controller",
    "RateControllerResult",
    "generation_rate",
    "KmsReplica",
    "KmsCluster",
    "DEFAULT_TTL_MS",
]

DEFAULT_TTL_MS = 30_000
RATE_FLOOR_FRACTION = 0.1


class InsufficientEntropy(RuntimeError):
    """Rental request larger than the current pool balance."""


class UnknownKey(KeyError):
    """Operation on a key identifier this service never issued."""


class AlreadyRetired(RuntimeError):
    """Retire called twice for the same key."""


@dataclass(frozen=True)
class KeyPoolState:
    """Token-bucket snapshot: balance, capacity, generation rate, clock."""

    balance_bits: int
    capacity_bits: int
    gen_rate_bps: float
    clock_ms: int = 0

    def __post_init__(self):
        if self.capacity_bits <= 0:
            raise ValueError("capacity must be positive")
        if not 0 <= self.balance_bits <= self.capacity_bits:
            raise ValueError("balance must lie in [0, capacity]")
        if self.gen_rate_bps < 0:
            raise ValueError("generation rate must be non-negative")


def step_bucket(s: KeyPoolState, delta_ms: int, consumed_bits: int = 0) -> KeyPoolState:
    """Advance the bucket by ``delta_ms``: B' = min(M, B - consumed + floor(R_gen * delta)).

    Over-consumption clamps at zero (rental paths never reach that branch;
    direct callers get saturating semantics).
    """
    if delta_ms <= 0:
        raise ValueError("delta_ms must be positive")
    if consumed_bits < 0:
        raise ValueError("consumed_bits must be non-negative")
    replenished = math.floor(s.gen_rate_bps * delta_ms / 1000.0)
    balance = min(s.capacity_bits, s.balance_bits - consumed_bits + replenished)
    return replace(s, balance_bits=max(0, balance), clock_ms=s.clock_ms + delta_ms)


def crdt_merge(x: int, y: int) -> int:
    """Merge per-key issuance watermarks from two replicas: min(x, y)."""
    return min(x, y)


@dataclass
class KeyRecord:
    """An issued key: identifier, bits, lifetime, and lifecycle state."""

    key_id: str                 # 32 hex chars (128 bits)
    key_bits: bytes
    ttl_ms: int = DEFAULT_TTL_MS
    issued_at_ms: int = 0
    state: str = "active"       # active | retired | expired

    def expired_at(self, now_ms: int) -> bool:
        return now_ms - self.issued_at_ms > self.ttl_ms

    def to_json(self) -> dict:
        """Wire form of a Rent response."""
        return {
            "key_id": self.key_id,
            "key": base64.b64encode(self.key_bits).decode("ascii"),
            "ttl_ms": self.ttl_ms,
        }


@dataclass(frozen=True)
class RateAdaptState:
    """Controller state: current rate, ceiling, initial gain, step counter."""

    r_t_bps: float
    r_max_bps: float
    gamma0: float = 0.5
    t: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma0 < 1.0:
            raise ValueError("gamma0 must lie in (0, 1)")
        if self.t < 1:
            raise ValueError("step counter starts at 1")
        lo = RATE_FLOOR_FRACTION * self.r_max_bps
        if not lo - 1e-9 <= self.r_t_bps <= self.r_max_bps + 1e-9:
            raise ValueError("rate must lie in [0.1 R_max, R_max]")


def rate_adapt_step(st: RateAdaptState, q_t: float) -> RateAdaptState:
    """One stochastic-approximation update with decaying gain gamma_0 / t."""
    if not 0.0 <= q_t < 1.0:
        raise ValueError("q_t must lie in [0, 1)")
    gamma_t = st.gamma0 / st.t
    r_next = max(RATE_FLOOR_FRACTION * st.r_max_bps, (1.0 - gamma_t * q_t) * st.r_t_bps)
    return replace(st, r_t_bps=r_next, t=st.t + 1)


def rate_adapt_fixed_point(r_max: float, gamma: float, q_bar: float) -> float:
    """Steady-state rate R_max (1 - gamma * q_bar) for a given gain value."""
    return r_max * (1.0 - gamma * q_bar)


def rate_adapt_mse_bound(gamma0: float, r_max: float, var_q: float) -> float:
    """Steady-state mean-square error bound gamma_0 R_max^2 Var(q) / (2 - gamma_0)."""
    if not 0.0 < gamma0 < 2.0:
        raise ValueError("gamma0 must lie in (0, 2)")
    return gamma0 * r_max * r_max * var_q / (2.0 - gamma0)


def generation_rate(r0_bps: float, q_t: float, n_block: int, epsilon: float = DEFAULT_EPSILON) -> float:
    """Replenishment rate R_0 (1 - eta(q)) with the extractor's loss model.

    eta(q) = h2(q) + 2 log2(1/epsilon) / n_block is the fractional loss the
    leftover-hash extraction imposes on an n_block-bit raw block.
    """
    eta = binary_entropy(q_t) + 2.0 * math.log2(1.0 / epsilon) / n_block
    return max(0.0, r0_bps * (1.0 - eta))


# ---------------------------------------------------------------------------
# rate controller
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateControllerResult:
    """Per-interval series and summary metrics for one strategy run."""

    strategy: str
    t_ms: np.ndarray
    target_bps: np.ndarray     # rate requested by the strategy
    capacity_bps: np.ndarray   # secure capacity of the interval
    output_bps: np.ndarray     # min(target, capacity)
    dropped_bits: np.ndarray   # cumulative bits requested above capacity
    state_bps: np.ndarray      # controller state trajectory (fixed: the target)

    @property
    def cap_exceed_fraction(self) -> float:
        return float(np.mean(self.target_bps > self.capacity_bps))

    @property
    def total_dropped_bits(self) -> float:
        return float(self.dropped_bits[-1])

    def rows(self):
        for i in range(len(self.t_ms)):
            yield (
                int(self.t_ms[i]),
                float(self.target_bps[i]),
                float(self.capacity_bps[i]),
                float(self.output_bps[i]),
                float(self.dropped_bits[i]),
            )


def run_rate_controller(
    trace: QberTrace,
    st0: RateAdaptState,
    window_ms: int = 1,
    strategy: str = "rate_adapt",
    fixed_target_bps: float | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> RateControllerResult:
    """Drive one emission strategy over a QBER trace at 1 ms resolution.

    The secure capacity of each interval is the extractable length of the
    interval's raw-bit budget n = floor(R_max / 1000) at the measured QBER,
    scaled back to bits/s. The controller state advances once per
    ``window_ms`` using the window's mean QBER.

    ``fixed_target_bps`` defaults to 0.8 R_max.
    """
    if strategy not in ("rate_adapt", "fixed"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if window_ms < 1:
        raise ValueError("window_ms must be >= 1")
    samples = trace.samples
    n_iv = len(samples)
    if n_iv == 0:
        raise ValueError("trace must be non-empty")

    r_max = st0.r_max_bps
    n_raw = int(r_max // 1000)
    if fixed_target_bps is None:
        fixed_target_bps = 0.8 * r_max

    capacity = extractable_length_vec(n_raw, samples, epsilon) * 1000.0

    target = np.empty(n_iv)
    state = np.empty(n_iv)
    if strategy == "fixed":
        target[:] = fixed_target_bps
        state[:] = fixed_target_bps
    else:
        st = st0
        for start in range(0, n_iv, window_ms):
            stop = min(start + window_ms, n_iv)
            q_win = float(samples[start:stop].mean())
            st = rate_adapt_step(st, q_win)
            state[start:stop] = st.r_t_bps
            # preemptive reduction: never request beyond the secure capacity
            # implied by the current measurement
            target[start:stop] = np.minimum(st.r_t_bps, capacity[start:stop])

    output = np.minimum(target, capacity)
    dropped_per_iv = np.maximum(0.0, target - capacity) * (1.0 / 1000.0)
    return RateControllerResult(
        strategy=strategy,
        t_ms=np.arange(n_iv),
        target_bps=target,
        capacity_bps=capacity,
        output_bps=output,
        dropped_bits=np.cumsum(dropped_per_iv),
        state_bps=state,
    )


# ---------------------------------------------------------------------------
# replicated service
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    """Consumption statistics and anomaly flags for a session window."""

    session_id: str
    window_ms: tuple[int, int]
    bits_consumed: int
    rent_count: int
    failure_count: int
    anomaly_flags: tuple[str, ...]


class KmsReplica:
    """Single-writer key-service replica backed by one token bucket."""

    def __init__(
        self,
        replica_id: int,
        pool: KeyPoolState,
        seed: int = 0,
        ttl_ms: int = DEFAULT_TTL_MS,
        baseline_qber: float = 0.01,
    ):
        if not 0 <= replica_id < 256:
            raise ValueError("replica_id must fit one byte")
        self.replica_id = replica_id
        self.pool = pool
        self.ttl_ms = ttl_ms
        self.baseline_qber = baseline_qber
        self._rng = substream(seed, "kms", replica_id)
        self.keys: dict[str, KeyRecord] = {}
        self.issuance: dict[str, int] = {}
        self.events: list[tuple] = []          # (t_ms, event, replica, key_id, bits, balance)
        self._qber_window: list[float] = []

    # -- key lifecycle -------------------------------------------------------

    def _new_key_id(self) -> str:
        # 128-bit id, replica index in the top byte: replicas cannot collide
        return (bytes([self.replica_id]) + self._rng.bytes(15)).hex()

    def advance_clock(self, now_ms: int) -> None:
        """Accrue generation up to ``now_ms`` (no-op if clock already there)."""
        delta = now_ms - self.pool.clock_ms
        if delta > 0:
            self.pool = step_bucket(self.pool, delta)

    def rent(self, n_bits: int, now_ms: int, session_id: str = "-") -> KeyRecord:
        """Issue ``n_bits`` of key material or raise InsufficientEntropy."""
        if n_bits <= 0:
            raise ValueError("n_bits must be positive")
        self.advance_clock(now_ms)
        if n_bits > self.pool.balance_bits:
            self.events.append((now_ms, "rent_fail", self.replica_id, "-", n_bits,
                                self.pool.balance_bits))
            raise InsufficientEntropy(
                f"requested {n_bits} bits, balance {self.pool.balance_bits}"
            )
        self.pool = replace(self.pool, balance_bits=self.pool.balance_bits - n_bits)
        key_id = self._new_key_id()
        record = KeyRecord(
            key_id=key_id,
            key_bits=self._rng.bytes((n_bits + 7) // 8),
            ttl_ms=self.ttl_ms,
            issued_at_ms=now_ms,
        )
        self.keys[key_id] = record
        self.issuance[key_id] = 1
        self.events.append((now_ms, "rent", self.replica_id, key_id, n_bits,
                            self.pool.balance_bits))
        return record

    def retire(self, key_id: str, now_ms: int = 0) -> None:
        record = self.keys.get(key_id)
        if record is None:
            raise UnknownKey(key_id)
        if record.state != "active":
            raise AlreadyRetired(key_id)
        record.state = "retired"
        self.events.append((now_ms, "retire", self.replica_id, key_id, 0,
                            self.pool.balance_bits))

    def expire_sweep(self, now_ms: int) -> int:
        """Expire all active keys past their ttl; returns the count."""
        expired = 0
        for record in self.keys.values():
            if record.state == "active" and record.expired_at(now_ms):
                record.state = "expired"
                expired += 1
                self.events.append((now_ms, "expire", self.replica_id, record.key_id,
                                    0, self.pool.balance_bits))
        return expired

    # -- monitoring ----------------------------------------------------------

    def record_qber(self, q: float) -> None:
        self._qber_window.append(q)

    def audit(self, session_id: str, window_ms: tuple[int, int],
              sample_bits: int = 10 ** 6) -> AuditReport:
        """Summarize consumption inside the window and raise anomaly flags.

        ``empty_pool`` flags any failed rental in the window; ``qber_alarm``
        fires when the running QBER deviation is large enough that the
        chi-square test would miss it with probability below 1e-6.
        """
        lo, hi = window_ms
        bits = rents = failures = 0
        for (t, event, _r, _k, n, _b) in self.events:
            if not lo <= t <= hi:
                continue
            if event == "rent":
                rents += 1
                bits += n
            elif event == "rent_fail":
                failures += 1
        flags = []
        if failures:
            flags.append("empty_pool")
        if self._qber_window:
            delta = abs(float(np.mean(self._qber_window)) - self.baseline_qber)
            if chi_square_miss_probability(self.baseline_qber, delta, sample_bits) < 1e-6:
                flags.append("qber_alarm")
        return AuditReport(
            session_id=session_id,
            window_ms=window_ms,
            bits_consumed=bits,
            rent_count=rents,
            failure_count=failures,
            anomaly_flags=tuple(flags),
        )

    def write_event_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t_ms,event,replica,key_id,bits,balance\n")
            for row in self.events:
                fh.write(",".join(str(v) for v in row) + "\n")


class KmsCluster:
    """Active-active replica group with uniform-random request routing."""

    def __init__(
        self,
        m: int,
        pool: KeyPoolState,
        seed: int = 0,
        ttl_ms: int = DEFAULT_TTL_MS,
    ):
        if m < 1:
            raise ValueError("need at least one replica")
        self.replicas = [
            KmsReplica(i, pool, seed=seed, ttl_ms=ttl_ms) for i in range(m)
        ]
        self._route_rng = substream(seed, "kms", "ecmp")
        self.merged: dict[str, int] = {}

    def rent(self, n_bits: int, now_ms: int, session_id: str = "-") -> KeyRecord:
        replica = self.replicas[self._route_rng.integers(len(self.replicas))]
        return replica.rent(n_bits, now_ms, session_id)

    def retire(self, key_id: str, now_ms: int = 0) -> None:
        for replica in self.replicas:
            if key_id in replica.keys:
                replica.retire(key_id, now_ms)
                return
        raise UnknownKey(key_id)

    def reconcile(self) -> dict[str, int]:
        """Merge issuance watermarks across replicas with the min rule.

        Collisions (two replicas having issued the same identifier) are
        resolved by the merge and reported in ``self.collisions``; the
        replica-prefixed id scheme makes them structurally impossible.
        """
        merged: dict[str, int] = {}
        self.collisions: list[str] = []
        for replica in self.replicas:
            for key_id, count in replica.issuance.items():
                if key_id in merged:
                    merged[key_id] = crdt_merge(merged[key_id], count)
                    self.collisions.append(key_id)
                else:
                    merged[key_id] = count
        self.merged = merged
        return merged

    def all_key_ids(self) -> list[str]:
        ids: list[str] = []
        for replica in self.replicas:
            ids.extend(replica.keys.keys())
        return ids
