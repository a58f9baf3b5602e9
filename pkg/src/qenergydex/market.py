"""Stackelberg-constrained bilateral market clearing.

Followers (prosumers) hold quadratic costs C_i(p) = p^2 / (2 alpha_i) and
respond to bus prices with the capped affine rule

    p_i(u) = clip( alpha_i (pi_i - (H^T u)_i), -p_max_i, +p_max_i ).

The leader picks line shadow prices u >= 0 minimizing its strictly convex
cost 0.5 u^T Q u + c^T u subject to the followers' induced line flows
H p(u) staying inside the thermal limits. Both the leader problem and the
social-welfare benchmark are solved with projected-gradient methods: the
social problem through its Lagrangian dual (the dual gradient is the line
slack, with the capped response as the inner argmax), the leader problem
with a quadratic feasibility-penalty continuation and a small linear
smoothing of the response kinks.

Scenario set:

  SOCIAL  welfare maximum subject to caps and line limits,
  STACK   leader-follower equilibrium as above,
  BASE    congestion-blind response, uniformly rescaled onto the worst
          violated line,
  WBASE   congestion-blind response with welfare-aware curtailment
          (relief direction proportional to alpha_i H_bi, the least
          welfare-loss direction in the 1/alpha metric), falling back to
          uniform rescaling when targeted relief is insufficient; of the
          two feasible candidates the better one is kept, so WBASE never
          does worse than BASE.

Security coupling: a node participates when its sampled handshake latency
meets the deadline and the cumulative key cost fits the entropy budget
(admission in node-id order); clearing then runs on the admitted subset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .rng import substream

__all__ = [
    "Prosumer",
    "GridModel",
    "MarketOutcome",
    "Infeasible",
    "NoConvergence",
    "follower_response",
    "aggregate_response",
    "welfare",
    "solve_social",
    "solve_stackelberg",
    "solve_base",
    "security_coupled_clearing",
    "random_instance",
    "synthetic_grid_instance",
    "instance_to_json",
    "instance_from_json",
    "SCENARIOS",
]

SCENARIOS = ("SOCIAL", "STACK", "BASE", "WBASE")
DEFAULT_TOL = 1e-6
MAX_ITER = 100_000


class Infeasible(RuntimeError):
    """No admissible price vector satisfies the line limits."""


class NoConvergence(RuntimeError):
    """Iteration cap reached before the tolerance was met."""


@dataclass(frozen=True)
class Prosumer:
    id: int
    alpha: float
    pi: float
    p_max: float
    bus: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")


@dataclass(frozen=True)
class GridModel:
    """PTDF matrix (lines x prosumers), limits, and leader cost coefficients."""

    ptdf: np.ndarray
    line_limits: np.ndarray
    leader_q_diag: np.ndarray
    leader_c: np.ndarray

    def __post_init__(self):
        ptdf = np.atleast_2d(np.asarray(self.ptdf, dtype=float))
        limits = np.asarray(self.line_limits, dtype=float)
        q = np.asarray(self.leader_q_diag, dtype=float)
        c = np.asarray(self.leader_c, dtype=float)
        if q.ndim == 0:
            q = np.full(ptdf.shape[0], float(q))
        if c.ndim == 0:
            c = np.full(ptdf.shape[0], float(c))
        object.__setattr__(self, "ptdf", ptdf)
        object.__setattr__(self, "line_limits", limits)
        object.__setattr__(self, "leader_q_diag", q)
        object.__setattr__(self, "leader_c", c)
        if limits.shape != (ptdf.shape[0],):
            raise ValueError("line_limits must have one entry per line")
        if (limits <= 0).any():
            raise ValueError("line limits must be positive")
        if (q <= 0).any():
            raise ValueError("leader cost must be strictly convex (q > 0)")

    @property
    def n_lines(self) -> int:
        return self.ptdf.shape[0]

    def restrict(self, keep: np.ndarray) -> "GridModel":
        """Grid restricted to a subset of prosumer columns."""
        return GridModel(
            ptdf=self.ptdf[:, keep],
            line_limits=self.line_limits,
            leader_q_diag=self.leader_q_diag,
            leader_c=self.leader_c,
        )


@dataclass(frozen=True)
class MarketOutcome:
    u: np.ndarray
    p: np.ndarray
    welfare: float
    scenario: str
    feasible: bool
    iterations: int = 0
    kkt_residual: float = 0.0


def _vectors(prosumers: list[Prosumer]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    alpha = np.array([pr.alpha for pr in prosumers])
    pi = np.array([pr.pi for pr in prosumers])
    pmax = np.array([pr.p_max for pr in prosumers])
    return alpha, pi, pmax


def follower_response(prosumer: Prosumer, u: np.ndarray, h_column: np.ndarray) -> float:
    """Capped best response p_i = clip(alpha_i (pi_i - u . H_col), +-p_max)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if (u < 0).any():
        raise ValueError("prices must be non-negative")
    raw = prosumer.alpha * (prosumer.pi - float(np.dot(u, np.atleast_1d(h_column))))
    return float(np.clip(raw, -prosumer.p_max, prosumer.p_max))


def aggregate_response(
    prosumers: list[Prosumer], u: np.ndarray, h: np.ndarray
) -> np.ndarray:
    """Stacked follower responses; equals diag(alpha)(pi - H^T u) when no cap binds."""
    alpha, pi, pmax = _vectors(prosumers)
    h = np.atleast_2d(np.asarray(h, dtype=float))
    raw = alpha * (pi - h.T @ np.atleast_1d(u))
    return np.clip(raw, -pmax, pmax)


def welfare(prosumers: list[Prosumer], p: np.ndarray) -> float:
    """Social welfare sum(pi_i p_i - p_i^2 / (2 alpha_i))."""
    alpha, pi, _ = _vectors(prosumers)
    p = np.asarray(p, dtype=float)
    return float(np.sum(pi * p - p * p / (2.0 * alpha)))


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _response(alpha, pi, pmax, h, u):
    return np.clip(alpha * (pi - h.T @ u), -pmax, pmax)


def _kkt_residual_social(u, flows, limits) -> float:
    scale = 1.0 + np.abs(limits)
    viol = np.maximum(0.0, flows - limits) / scale
    slack = np.maximum(0.0, limits - flows)
    cs = (u * slack) / (scale * (1.0 + np.abs(u)))
    return float(max(viol.max(initial=0.0), cs.max(initial=0.0)))


def solve_social(
    grid: GridModel,
    prosumers: list[Prosumer],
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
    u0: np.ndarray | None = None,
) -> MarketOutcome:
    """Welfare maximum under caps and line limits, via the projected dual.

    The dual function g(u) = max_p [W(p) - u.(Hp - limits)] has the capped
    response as inner argmax and gradient limits - H p(u); it is minimized
    over u >= 0 with projected Newton steps (the dual Hessian is the
    line-flow sensitivity of the active prosumers) guarded by Armijo
    backtracking on the dual value.
    """
    alpha, pi, pmax = _vectors(prosumers)
    h = grid.ptdf
    limits = grid.line_limits

    def g_val(u):
        p = _response(alpha, pi, pmax, h, u)
        return welfare(prosumers, p) - float(u @ (h @ p - limits)), p

    u = np.zeros(grid.n_lines) if u0 is None else np.maximum(0.0, np.asarray(u0, float))
    g_u, p = g_val(u)
    iterations = 0
    residual = math.inf
    newton_budget = min(max_iter, 400)
    for iterations in range(1, newton_budget + 1):
        raw = alpha * (pi - h.T @ u)
        p = np.clip(raw, -pmax, pmax)
        flows = h @ p
        residual = _kkt_residual_social(u, flows, limits)
        if residual <= tol:
            break
        grad = limits - flows
        act = _smoothed_activity(raw, pmax)
        m = (h * (act * alpha)) @ h.T
        ridge = 1e-10 * (1.0 + float(np.trace(m)) / len(limits))
        free = (u > 0) | (grad < 0)
        d = np.zeros_like(u)
        idx = np.nonzero(free)[0]
        if idx.size == 0:
            break
        sub = m[np.ix_(idx, idx)] + ridge * np.eye(idx.size)
        try:
            d[idx] = np.linalg.solve(sub, -grad[idx])
        except np.linalg.LinAlgError:
            d[idx] = -grad[idx]
        cap = 1e3 * (1.0 + float(np.abs(u).max()))
        dmax = float(np.abs(d).max(initial=0.0))
        if dmax > cap:
            d *= cap / dmax
        slope = float(grad @ d)
        if slope >= 0:
            d = np.where(free, -grad, 0.0)
            slope = float(grad @ d)
        t_step = 1.0
        accepted = False
        for _bt in range(60):
            u_try = np.maximum(0.0, u + t_step * d)
            g_try, _ = g_val(u_try)
            if g_try <= g_u + 1e-4 * t_step * slope + 1e-15:
                accepted = True
                break
            t_step *= 0.5
        if not accepted:
            break
        u, g_u = u_try, g_try
    p = _response(alpha, pi, pmax, h, u)
    flows = h @ p
    residual = _kkt_residual_social(u, flows, limits)
    if residual > tol:
        raise NoConvergence(f"social solver residual {residual:.2e} after {iterations} iterations")
    return MarketOutcome(
        u=u,
        p=p,
        welfare=welfare(prosumers, p),
        scenario="SOCIAL",
        feasible=bool((flows <= limits + 1e-6 * (1 + np.abs(limits))).all()),
        iterations=iterations,
        kkt_residual=residual,
    )


def _smoothed_activity(raw, pmax):
    # 1 inside the cap, 0 outside, linear ramp of width delta near the kink
    delta = 1e-8 * (1.0 + pmax)
    return np.clip((pmax - np.abs(raw)) / delta + 0.5, 0.0, 1.0)


def _ray_start(h, alpha, pi, pmax, limits, q, c) -> np.ndarray:
    """Initial leader point: best uniform-price probe, feasibility first.

    The penalized landscape of the capped response is only piecewise
    convex; descending from the least-violating (cheapest) point of the
    uniform-price ray avoids basins where congestion cannot be relieved.
    """
    best_u = np.zeros(limits.shape)
    best_key = (math.inf, math.inf)
    for kappa in np.concatenate(([0.0], np.geomspace(1e-3, 1e4, 36))):
        u = np.full(limits.shape, kappa)
        flows = h @ np.clip(alpha * (pi - h.T @ u), -pmax, pmax)
        viol = float((np.maximum(0.0, flows - limits) / (1.0 + np.abs(limits))).max(initial=0.0))
        cost = 0.5 * float(q @ (u * u)) + float(c @ u)
        key = (round(viol / 1e-9), cost) if viol > 1e-9 else (0.0, cost)
        if key < best_key:
            best_key = key
            best_u = u
    return best_u


def solve_stackelberg(
    grid: GridModel,
    prosumers: list[Prosumer],
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
    u0: np.ndarray | None = None,
) -> MarketOutcome:
    """Leader problem min C_grid(u) s.t. H p(u) <= limits, u >= 0.

    Solved by projected gradient on a quadratic feasibility penalty with
    continuation (penalty weight grows geometrically); the response kinks
    are smoothed linearly over a vanishing width for the Jacobian.
    """
    alpha, pi, pmax = _vectors(prosumers)
    h = grid.ptdf
    limits = grid.line_limits
    q = grid.leader_q_diag
    c = grid.leader_c
    scale = 1.0 + np.abs(limits)

    def flows_of(u):
        return h @ _response(alpha, pi, pmax, h, u)

    def phi(u, rho):
        p = _response(alpha, pi, pmax, h, u)
        viol = np.maximum(0.0, h @ p - limits)
        return 0.5 * float(q @ (u * u)) + float(c @ u) + 0.5 * rho * float(viol @ viol)

    def phi_grad(u, rho):
        raw = alpha * (pi - h.T @ u)
        p = np.clip(raw, -pmax, pmax)
        viol = np.maximum(0.0, h @ p - limits)
        act = _smoothed_activity(raw, pmax)
        return q * u + c - h @ ((act * alpha) * (h.T @ (rho * viol)))

    def rel_viol(u):
        return float((np.maximum(0.0, flows_of(u) - limits) / scale).max(initial=0.0))

    def stat_residual(u, rho):
        """Projected stationarity of the penalized KKT system, normalized.

        The response is nonsmooth at the caps, so any activity value in
        [0, 1] is a valid subgradient choice for a prosumer sitting exactly
        on its cap; the residual minimizes over the kink extremes so a
        point that is stationary in the generalized sense reports as such.
        """
        raw = alpha * (pi - h.T @ u)
        p = np.clip(raw, -pmax, pmax)
        lam = rho * np.maximum(0.0, h @ p - limits)
        act = _smoothed_activity(raw, pmax)
        kinked = (act > 0.0) & (act < 1.0)
        variants = [act]
        if kinked.any():
            variants.append(np.where(kinked, 0.0, act))
            variants.append(np.where(kinked, 1.0, act))
        best = math.inf
        for a in variants:
            grad = q * u + c - h @ ((a * alpha) * (h.T @ lam))
            stat = np.where(u > 0, np.abs(grad), np.maximum(0.0, -grad))
            best = min(best, float((stat / (1.0 + np.abs(q * u) + np.abs(c))).max(initial=0.0)))
        return best

    u_star = -np.minimum(0.0, c) / q     # unconstrained leader minimum on u >= 0

    def interior_jump(u):
        """From a feasible point, move toward the unconstrained minimum as
        far as feasibility allows (bisection on the segment)."""
        if rel_viol(u_star) <= 0.0:
            return u_star.copy()
        lo, hi = 0.0, 1.0
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if rel_viol(u + mid * (u_star - u)) <= 0.0:
                lo = mid
            else:
                hi = mid
        return u + lo * (u_star - u)

    def descend(u, rho, budget=60):
        """Projected Newton descent on phi with Armijo backtracking.

        The penalty Hessian is exact almost everywhere (the response is
        piecewise affine): diag(q) + rho * sum over violated lines of the
        outer product of that line's flow sensitivity. Newton steps on the
        free set cut through the stiff penalty wall that defeats
        first-order steps.
        """
        u = u.copy()
        f_u = phi(u, rho)
        iters = 0
        for _ in range(budget):
            iters += 1
            raw = alpha * (pi - h.T @ u)
            p = np.clip(raw, -pmax, pmax)
            viol = np.maximum(0.0, h @ p - limits)
            act = _smoothed_activity(raw, pmax)
            grad = q * u + c - h @ ((act * alpha) * (h.T @ (rho * viol)))
            pg = np.where(u > 0, np.abs(grad), np.minimum(0.0, grad))
            if np.abs(pg).max(initial=0.0) <= 1e-11 * (1.0 + abs(f_u)):
                break
            free = (u > 0) | (grad < 0)
            if not free.any():
                break
            m = (h * (act * alpha)) @ h.T            # flow sensitivity, lines x lines
            v_idx = np.nonzero(viol > 0)[0]
            hess = np.diag(q).astype(float)
            if v_idx.size:
                mv = m[:, v_idx]
                hess = hess + rho * (mv @ mv.T)
            idx = np.nonzero(free)[0]
            d = np.zeros_like(u)
            sub = hess[np.ix_(idx, idx)] + 1e-12 * np.eye(idx.size)
            try:
                d[idx] = np.linalg.solve(sub, -grad[idx])
            except np.linalg.LinAlgError:
                d[idx] = -grad[idx] / np.diag(sub)
            slope = float(grad @ d)
            if slope >= 0:
                d = np.where(free, -grad, 0.0)
                slope = float(grad @ d)
            t_step = 1.0
            accepted = False
            for _bt in range(50):
                u_try = np.maximum(0.0, u + t_step * d)
                f_try = phi(u_try, rho)
                if f_try <= f_u + 1e-4 * t_step * slope + 1e-15:
                    accepted = True
                    break
                t_step *= 0.5
            if not accepted:
                break
            move = float(np.abs(u_try - u).max())
            u, f_u = u_try, f_try
            if move <= 1e-14 * (1.0 + float(np.abs(u).max())):
                break
        return u, iters

    def cost_of(u):
        return 0.5 * float(q @ (u * u)) + float(c @ u)

    if u0 is None:
        u = _ray_start(h, alpha, pi, pmax, limits, q, c)
        if rel_viol(u) <= 0.0:
            u = interior_jump(u)
    else:
        u = np.maximum(0.0, np.asarray(u0, dtype=float))
    total_iters = 0
    newton_budget = min(max_iter, 80)
    stat_tol = max(tol, 1e-7)
    best: tuple[float, np.ndarray, float] | None = None    # (cost, u, rho)
    last_viol = math.inf
    rho = 1e4
    while rho <= 1e14:
        u, used = descend(u, rho, newton_budget)
        total_iters += used
        last_viol = rel_viol(u)
        if last_viol <= tol:
            cost = cost_of(u)
            if best is None or cost < best[0]:
                best = (cost, u.copy(), rho)
            if stat_residual(u, rho) <= stat_tol:
                break
        rho *= 100.0
    if best is None:
        # feasibility restoration: penalty descent can drift into a basin
        # where congestion is no longer price-relievable; restart at high
        # penalty from the least-violating uniform-price point
        u = _ray_start(h, alpha, pi, pmax, limits, q, c)
        for rho in (1e10, 1e12, 1e14):
            u, used = descend(u, rho, newton_budget)
            total_iters += used
            last_viol = rel_viol(u)
            if last_viol <= tol:
                best = (cost_of(u), u.copy(), rho)
                break
    if best is None:
        if last_viol > 1e-3:
            raise Infeasible(f"line violation {last_viol:.2e} persists at saturation penalty")
        raise NoConvergence(f"leader solver violation {last_viol:.2e}")
    _, u, rho_used = best
    if stat_residual(u, rho_used) > stat_tol:
        # response kinks can pinch the Newton descent; jitter and re-descend
        # (fixed seed keeps runs reproducible), keeping the best feasible cost
        jitter_rng = np.random.default_rng(0x5EED)
        best_cost = cost_of(u)
        best_u = u
        for _try in range(4):
            u_k = np.maximum(0.0, u * (1.0 + 0.03 * jitter_rng.standard_normal(len(u))))
            u_k, used = descend(u_k, rho_used, newton_budget)
            total_iters += used
            if rel_viol(u_k) <= tol:
                cost_k = cost_of(u_k)
                if cost_k < best_cost:
                    best_u, best_cost = u_k, cost_k
        u = best_u
    last_viol = rel_viol(u)
    p = _response(alpha, pi, pmax, h, u)
    residual = float(max(last_viol, stat_residual(u, rho_used)))
    return MarketOutcome(
        u=u,
        p=p,
        welfare=welfare(prosumers, p),
        scenario="STACK",
        feasible=True,
        iterations=total_iters,
        kkt_residual=residual,
    )


def solve_base(
    grid: GridModel, prosumers: list[Prosumer], weighted: bool = False
) -> MarketOutcome:
    """Congestion-blind clearing with after-the-fact feasibility repair.

    BASE rescales every injection by the single factor that makes the worst
    violated line exactly binding. WBASE first curtails along the least
    welfare-loss direction for the worst line (proportional to
    alpha_i H_bi), re-clips, falls back to uniform rescaling if violations
    remain, and keeps whichever feasible candidate yields higher welfare.
    """
    alpha, pi, pmax = _vectors(prosumers)
    h = grid.ptdf
    limits = grid.line_limits
    p0 = np.clip(alpha * pi, -pmax, pmax)
    flows0 = h @ p0
    violated = flows0 > limits

    def _scale(p):
        flows = h @ p
        over = flows > limits
        if not over.any():
            return p
        theta = float(np.min(limits[over] / flows[over]))
        return theta * p

    if not violated.any():
        p_final = p0
    elif not weighted:
        p_final = _scale(p0)
    else:
        worst = int(np.argmax(flows0 - limits))
        row = h[worst]
        need = flows0[worst] - limits[worst]
        denom = float(np.sum(alpha * row * row))
        if denom <= 0:
            p_candidate = _scale(p0)
        else:
            relief = need * (alpha * row) / denom
            p_candidate = np.clip(p0 - relief, -pmax, pmax)
            p_candidate = _scale(p_candidate)   # no-op if targeted relief sufficed
        p_uniform = _scale(p0)
        if welfare(prosumers, p_candidate) < welfare(prosumers, p_uniform):
            p_candidate = p_uniform
        p_final = p_candidate

    return MarketOutcome(
        u=np.zeros(grid.n_lines),
        p=p_final,
        welfare=welfare(prosumers, p_final),
        scenario="WBASE" if weighted else "BASE",
        feasible=bool((h @ p_final <= limits * (1 + 1e-12) + 1e-9).all()),
        iterations=0,
        kkt_residual=0.0,
    )


def clear_all_scenarios(
    grid: GridModel, prosumers: list[Prosumer], tol: float = DEFAULT_TOL
) -> dict[str, MarketOutcome]:
    return {
        "SOCIAL": solve_social(grid, prosumers, tol),
        "STACK": solve_stackelberg(grid, prosumers, tol),
        "BASE": solve_base(grid, prosumers, weighted=False),
        "WBASE": solve_base(grid, prosumers, weighted=True),
    }


# ---------------------------------------------------------------------------
# security-coupled participation
# ---------------------------------------------------------------------------


def security_coupled_clearing(
    grid: GridModel,
    prosumers: list[Prosumer],
    key_budget_bits: float,
    handshake_deadline_ms: float,
    qsah_latencies: np.ndarray,
    per_node_key_cost_bits: float,
    tol: float = DEFAULT_TOL,
) -> tuple[np.ndarray, dict[str, MarketOutcome]]:
    """Filter participants by security constraints, then clear all scenarios.

    Node i (in node-id order) is admitted when its sampled handshake
    latency meets the deadline and the cumulative key cost of admitted
    nodes stays inside the entropy budget. The filter depends only on
    latency and key cost, never on the market data.
    """
    latencies = np.asarray(qsah_latencies, dtype=float)
    if latencies.size == 0:
        raise ValueError("need at least one latency sample")
    admitted = []
    cost = 0.0
    order = sorted(range(len(prosumers)), key=lambda i: prosumers[i].id)
    for i in order:
        lat = latencies[i % len(latencies)]
        if lat <= handshake_deadline_ms and cost + per_node_key_cost_bits <= key_budget_bits:
            admitted.append(i)
            cost += per_node_key_cost_bits
    keep = np.array(sorted(admitted), dtype=int)
    if keep.size == 0:
        zero = MarketOutcome(
            u=np.zeros(grid.n_lines),
            p=np.zeros(0),
            welfare=0.0,
            scenario="EMPTY",
            feasible=True,
        )
        return keep, {s: MarketOutcome(
            u=zero.u, p=zero.p, welfare=0.0, scenario=s, feasible=True
        ) for s in SCENARIOS}
    sub = [prosumers[i] for i in keep]
    outcomes = clear_all_scenarios(grid.restrict(keep), sub, tol)
    return keep, outcomes


# ---------------------------------------------------------------------------
# instance generation and serialization
# ---------------------------------------------------------------------------


def random_instance(
    n_prosumers: int,
    n_lines: int,
    seed: int,
    congestion: float = 0.75,
) -> tuple[GridModel, list[Prosumer]]:
    """Small random instance with a controllable share of binding lines."""
    rng = substream(seed, "market", "instance")
    prosumers = [
        Prosumer(
            id=i,
            alpha=float(rng.lognormal(0.0, 0.4)),
            pi=float(np.clip(rng.normal(10.0, 2.0), 0.5, None)),
            p_max=float(rng.lognormal(1.6, 0.5)),
            bus=int(rng.integers(0, max(2, n_prosumers // 2))),
        )
        for i in range(n_prosumers)
    ]
    alpha, pi, pmax = _vectors(prosumers)
    h = rng.normal(0.0, 1.0, size=(n_lines, n_prosumers))
    h *= rng.random(size=h.shape) < 0.6              # sparsify
    norms = np.maximum(np.linalg.norm(h, axis=1), 1e-9)
    h /= norms[:, None]
    flows0 = np.abs(h @ np.clip(alpha * pi, -pmax, pmax))
    floor = max(float(flows0.max()), 1.0) * 0.05
    limits = np.maximum(flows0 * rng.uniform(congestion, 1.6, size=n_lines), floor)
    limits = _ensure_price_reachable(limits, h, alpha, pi, pmax)
    grid = GridModel(
        ptdf=h,
        line_limits=limits,
        leader_q_diag=np.ones(n_lines),
        leader_c=np.zeros(n_lines),
    )
    return grid, prosumers


def _ensure_price_reachable(limits, h, alpha, pi, pmax) -> np.ndarray:
    """Raise limits just enough that some uniform price vector is feasible.

    The leader steers injections only through prices, so the reachable flow
    set may not contain every point that is feasible in injection space;
    probing a uniform-price ray and lifting the limits onto its best point
    guarantees the leader problem has a feasible point.
    """
    best = np.full(limits.shape, np.inf)
    for kappa in np.concatenate(([0.0], np.geomspace(1e-3, 1e4, 36))):
        u = np.full(limits.shape, kappa)
        flows = h @ np.clip(alpha * (pi - h.T @ u), -pmax, pmax)
        worst = np.maximum(flows - limits, 0.0).max()
        if worst < np.maximum(best - limits, 0.0).max():
            best = flows
    return np.maximum(limits, best * (1.0 + 1e-9) + 1e-12)


def synthetic_grid_instance(
    n_prosumers: int = 3000,
    n_buses: int = 118,
    n_lines: int = 186,
    seed: int = 0,
    congestion: float = 0.85,
) -> tuple[GridModel, list[Prosumer]]:
    """Transmission-scale synthetic instance: prosumers mapped to buses.

    The PTDF over buses is sparse zero-mean with unit row normalization;
    prosumer columns are the PTDF entries of their bus. Valuations are
    normal, capacities lognormal. Limits are calibrated from the
    congestion-blind flows so that a moderate share of lines binds.
    """
    rng = substream(seed, "market", "grid118")
    prosumers = [
        Prosumer(
            id=i,
            alpha=float(rng.lognormal(0.0, 0.3)),
            pi=float(np.clip(rng.normal(10.0, 2.0), 0.5, None)),
            p_max=float(rng.lognormal(1.5, 0.5)),
            bus=int(rng.integers(0, n_buses)),
        )
        for i in range(n_prosumers)
    ]
    bus_ptdf = rng.normal(0.0, 1.0, size=(n_lines, n_buses))
    bus_ptdf *= rng.random(size=bus_ptdf.shape) < 0.25
    norms = np.maximum(np.linalg.norm(bus_ptdf, axis=1), 1e-9)
    bus_ptdf /= norms[:, None]
    buses = np.array([pr.bus for pr in prosumers])
    h = bus_ptdf[:, buses]
    alpha, pi, pmax = _vectors(prosumers)
    flows0 = np.abs(h @ np.clip(alpha * pi, -pmax, pmax))
    floor = max(float(flows0.max()), 1.0) * 0.02
    limits = np.maximum(flows0 * rng.uniform(congestion, 1.8, size=n_lines), floor)
    limits = _ensure_price_reachable(limits, h, alpha, pi, pmax)
    grid = GridModel(
        ptdf=h,
        line_limits=limits,
        leader_q_diag=np.ones(n_lines),
        leader_c=np.zeros(n_lines),
    )
    return grid, prosumers


def instance_to_json(grid: GridModel, prosumers: list[Prosumer]) -> str:
    doc = {
        "prosumers": [
            {"alpha": pr.alpha, "pi": pr.pi, "p_max": pr.p_max, "bus": pr.bus}
            for pr in prosumers
        ],
        "ptdf": [list(map(float, row)) for row in grid.ptdf],
        "line_limits": [float(v) for v in grid.line_limits],
        "leader_cost": {
            "q_diag": [float(v) for v in grid.leader_q_diag],
            "c": [float(v) for v in grid.leader_c],
        },
    }
    return json.dumps(doc, sort_keys=True)


def instance_from_json(text: str | Path) -> tuple[GridModel, list[Prosumer]]:
    if isinstance(text, Path):
        text = text.read_text()
    doc = json.loads(text)
    prosumers = [
        Prosumer(id=i, alpha=d["alpha"], pi=d["pi"], p_max=d["p_max"], bus=d["bus"])
        for i, d in enumerate(doc["prosumers"])
    ]
    grid = GridModel(
        ptdf=np.array(doc["ptdf"], dtype=float),
        line_limits=np.array(doc["line_limits"], dtype=float),
        leader_q_diag=np.array(doc["leader_cost"]["q_diag"], dtype=float),
        leader_c=np.array(doc["leader_cost"]["c"], dtype=float),
    )
    return grid, prosumers
