"""Slow reference implementations for cross-checking the production code.

Nothing here imports from the rest of the package: the oracles must stay
independent of the code paths they check. Everything is plain Python on
small inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

MAX_RELAYS = 10
MAX_FLOWS = 50
MAX_HISTORY = 50


def oracle_maxmin(capacities: Sequence[float], flows: Sequence[Sequence[int]],
                  rel_floor: float = 1e-13) -> list[float]:
    """Progressive filling by repeated small increments.

    All unfrozen flows are raised by a step; when a step would overfill a
    relay the step is cut tenfold, and once it drops below
    ``rel_floor * max(capacities)`` the overflowing relays are declared
    saturated and their flows frozen.
    """
    caps = [float(c) for c in capacities]
    paths = [sorted(set(int(r) for r in f if int(r) >= 0)) for f in flows]
    if len(caps) > MAX_RELAYS or len(paths) > MAX_FLOWS:
        raise ValueError(f"oracle limited to {MAX_RELAYS} relays and {MAX_FLOWS} flows")
    if not paths:
        return []
    rates = [0.0] * len(paths)
    active = set(range(len(paths)))
    coarse = max(caps)
    floor = rel_floor * max(caps)  # stays above the rounding unit of any level
    level = 0.0  # common rate of every unfrozen flow

    while active:
        users = {r: sum(1 for f in active if r in paths[f]) for r in range(len(caps))}
        fixed = {r: sum(rates[f] for f in range(len(paths)) if f not in active and r in paths[f])
                 for r in range(len(caps))}
        step = coarse
        while True:
            over = [r for r, k in users.items() if k and fixed[r] + (level + step) * k > caps[r]]
            if not over:
                level += step
                continue
            if step > floor:
                step /= 10.0
                continue
            frozen = {f for f in active if any(r in paths[f] for r in over)}
            for f in frozen:
                rates[f] = level
            active -= frozen
            break
    return rates


def maxmin_violations(capacities: Sequence[float], flows: Sequence[Sequence[int]],
                      rates: Sequence[float], tol: float = 1e-9) -> list[str]:
    """Check the bottleneck characterisation of max-min fairness.

    An allocation is max-min fair iff it is feasible and every flow crosses a
    saturated relay on which no other flow gets a larger rate.
    """
    paths = [sorted(set(int(r) for r in f if int(r) >= 0)) for f in flows]
    loads = [0.0] * len(capacities)
    for p, x in zip(paths, rates):
        for r in p:
            loads[r] += x
    problems = []
    for r, (ld, c) in enumerate(zip(loads, capacities)):
        if ld > c + tol:
            problems.append(f"relay {r} overloaded: {ld} > {c}")
    for f, p in enumerate(paths):
        if not any(loads[r] >= capacities[r] - tol and
                   all(rates[g] <= rates[f] + tol for g, q in enumerate(paths) if r in q)
                   for r in p):
            problems.append(f"flow {f} has no bottleneck relay")
    return problems


@dataclass(frozen=True)
class DenseGrid:
    """Geometric candidate set, step ``base`` between neighbours."""

    lo: float
    hi: float
    base: float = 1.001

    def points(self) -> list[float]:
        out = []
        k = 0
        while True:
            v = self.lo * self.base ** k
            if v > self.hi * (1 + 1e-12):
                return out
            out.append(v)
            k += 1


def _log_factorial(z: float, method: str) -> float:
    if method == "lgamma":
        return math.lgamma(z + 1.0)
    if method == "stirling":
        return 0.0 if z == 0 else z * math.log(z) - z
    raise ValueError(f"unknown factorial continuation {method!r}")


def oracle_loglik(kappa: float, m1: float, m2: float, lam_w: float, c_avg: float,
                  tol: float, factorial: str = "lgamma") -> float:
    if abs(m1 - 2 * m2) <= tol * m1:
        x = (kappa - m1) / c_avg
    else:
        x = kappa / m2 - 2
    if x < 0:
        return -math.inf
    if lam_w == 0:
        return 0.0 if x == 0 else -math.inf
    return -lam_w - _log_factorial(x, factorial) + x * math.log(lam_w)


def oracle_mle_argmax(history: Sequence[Sequence[float]], lambda_s: float, grid: DenseGrid,
                      c_avg: float | None = None, tol: float = 0.05,
                      factorial: str = "lgamma") -> float:
    """Exhaustive maximiser of the summed dual-probe log-likelihood.

    ``history`` rows are ``(m1, m2, w)`` or ``(m1, m2, w, c_avg)``. Ties keep
    the smallest candidate.
    """
    if len(history) > MAX_HISTORY:
        raise ValueError(f"history longer than {MAX_HISTORY} rounds")
    rows = []
    for h in history:
        m1, m2, w = float(h[0]), float(h[1]), float(h[2])
        ca = float(h[3]) if len(h) > 3 else c_avg
        rows.append((m1, m2, lambda_s * w, 1.0 if ca is None else ca))
    best, best_k = -math.inf, None
    for k in grid.points():
        s = 0.0
        for m1, m2, lw, ca in rows:
            s += oracle_loglik(k, m1, m2, lw, ca, tol, factorial)
            if s == -math.inf:
                break
        if s > best:
            best, best_k = s, k
    if best_k is None:
        raise ValueError("no feasible candidate on the grid")
    return best_k


def oracle_poisson_pmf(k: int, lam: float) -> float:
    if k < 0 or int(k) != k:
        raise ValueError("k must be a non-negative integer")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return 1.0 if k == 0 else 0.0
    return math.exp(-lam + k * math.log(lam) - math.lgamma(k + 1))
