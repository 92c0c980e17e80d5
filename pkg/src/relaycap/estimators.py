"""Relay capacity estimators.

Maximum-likelihood estimators work on a geometric grid of candidate
capacities. Each round contributes one log-likelihood term per
(relay, candidate); full-history estimators keep the running sum of those
terms in a :class:`LikelihoodTable` and publish the arg-max bin center.

Non-integer factorials are evaluated as ``lgamma(z + 1)``; a negative
implied client count makes a candidate impossible (``-inf``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, xlogy

from .allocation import MeasurementPair


class EstimatorKind(enum.Enum):
    ACTUAL = "actual"
    TORFLOW_P = "torflow-p"
    SBWS = "sbws"
    MLEFLOW_Q = "mleflow-q"
    DIPROBER_O = "diprober-o"
    DIPROBER_WH = "diprober-wh"

    @classmethod
    def parse(cls, text: str) -> "EstimatorKind":
        key = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown method {text!r}; valid methods: {valid}")


class Case(enum.Enum):
    # Relay not bottlenecked: the two probes split the unused capacity.
    CASE1 = 1
    # Relay bottlenecked: every flow gets an equal share C / (X + k).
    CASE2 = 2


@dataclass(frozen=True)
class QuantizationGrid:
    """Bins ``[a**(b-1), a**b]`` for ``b`` in ``b_min..b_max``, scored at their geometric centers."""

    base: float
    b_min: int
    b_max: int

    def __post_init__(self):
        if not self.base > 1:
            raise ValueError("grid base must exceed 1")
        if self.b_max < self.b_min:
            raise ValueError("empty grid")

    @classmethod
    def spanning(cls, lo: float, hi: float, base: float = 1.1) -> "QuantizationGrid":
        if not 0 < lo < hi:
            raise ValueError("grid bounds must satisfy 0 < lo < hi")
        la = math.log(base)
        b_min = math.floor(math.log(lo) / la + 1e-12) + 1
        b_max = math.ceil(math.log(hi) / la - 1e-12)
        return cls(base, b_min, max(b_max, b_min))

    @classmethod
    def for_capacities(cls, capacities: Sequence[float], base: float = 1.1) -> "QuantizationGrid":
        caps = np.asarray(capacities, dtype=float)
        return cls.spanning(min(1.0, caps.min() / 10.0), 1.1 * caps.max(), base)

    @property
    def size(self) -> int:
        return self.b_max - self.b_min + 1

    @property
    def edges(self) -> np.ndarray:
        return self.base ** np.arange(self.b_min - 1, self.b_max + 1, dtype=float)

    @property
    def centers(self) -> np.ndarray:
        return self.base ** (np.arange(self.b_min, self.b_max + 1, dtype=float) - 0.5)

    @property
    def lower(self) -> float:
        return self.base ** (self.b_min - 1)

    @property
    def upper(self) -> float:
        return self.base ** self.b_max

    def clamp(self, value):
        return np.clip(value, self.lower, self.upper)

    def bin_index(self, value) -> np.ndarray:
        """Position of ``value`` in the grid (0-based, clamped to the grid)."""
        b = np.ceil(np.log(np.asarray(value, dtype=float)) / math.log(self.base) - 1e-12)
        return np.clip(b - self.b_min, 0, self.size - 1).astype(int)

    @property
    def midpoint(self) -> float:
        return math.sqrt(self.lower * self.upper)


@dataclass
class EstimatorConfig:
    lambda_s: float
    grid: QuantizationGrid
    # None: use the average client rate measured in the current round.
    c_avg_client: float | None = None
    case_tolerance: float = 0.05
    kp: float = 1.0

    def __post_init__(self):
        if not self.lambda_s > 0:
            raise ValueError("lambda_s must be positive")
        if self.c_avg_client is not None and not self.c_avg_client > 0:
            raise ValueError("c_avg_client must be positive")
        if not 0 <= self.case_tolerance < 0.5:
            raise ValueError("case_tolerance must lie in [0, 0.5)")


@dataclass
class LikelihoodTable:
    scores: np.ndarray
    rounds: int = 0

    @classmethod
    def empty(cls, n_relays: int, grid: QuantizationGrid) -> "LikelihoodTable":
        return cls(np.zeros((n_relays, grid.size)))

    def accumulate(self, terms: np.ndarray) -> None:
        if terms.shape != self.scores.shape:
            raise ValueError(f"term matrix {terms.shape} does not match table {self.scores.shape}")
        self.scores += terms
        self.rounds += 1

    def argmax_estimates(self, grid: QuantizationGrid, previous: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bin center of each row's maximum; ties go to the smallest capacity.

        Rows with no feasible bin keep ``previous`` and are flagged.
        """
        best = np.argmax(self.scores, axis=1)
        infeasible = ~np.isfinite(self.scores[np.arange(len(best)), best])
        est = grid.centers[best]
        est = np.where(infeasible, previous, est)
        return est, infeasible


@dataclass
class EstimateUpdate:
    estimates: np.ndarray
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def classify_case(m: MeasurementPair, tol: float = 0.05) -> Case:
    return Case.CASE1 if abs(m.m1 - 2.0 * m.m2) <= tol * m.m1 else Case.CASE2


def case1_mask(m1: np.ndarray, m2: np.ndarray, tol: float) -> np.ndarray:
    m1 = np.asarray(m1, dtype=float)
    return np.abs(m1 - 2.0 * np.asarray(m2, dtype=float)) <= tol * m1


def _poisson_log_term(x: np.ndarray, lam_w: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -lam_w - gammaln(np.maximum(x, 0.0) + 1.0) + xlogy(np.maximum(x, 0.0), lam_w)
    return np.where(x < 0, -np.inf, out)


def dual_probe_terms(kappas: np.ndarray, m1: np.ndarray, m2: np.ndarray, lam_w: np.ndarray,
                     c_avg, is_case1: np.ndarray) -> np.ndarray:
    """Per-round log-likelihood of each candidate capacity, shape (relays, candidates).

    Case 1: ``X = (kappa - m1) / c_avg`` clients used what the probes left.
    Case 2: ``X = kappa / m2 - 2`` clients shared the relay with both probes.
    """
    k = np.asarray(kappas, dtype=float)[None, :]
    m1 = np.asarray(m1, dtype=float)[:, None]
    m2 = np.asarray(m2, dtype=float)[:, None]
    lam_w = np.asarray(lam_w, dtype=float)[:, None]
    c_avg = np.broadcast_to(np.asarray(c_avg, dtype=float), m1.shape[:1])[:, None]
    x = np.where(np.asarray(is_case1)[:, None], (k - m1) / c_avg, k / m2 - 2.0)
    return _poisson_log_term(x, lam_w)


def single_probe_terms(kappas: np.ndarray, m: np.ndarray, lam_w: np.ndarray) -> np.ndarray:
    """MLEFlow term: one probe sharing the relay with ``X = kappa / m - 1`` clients."""
    k = np.asarray(kappas, dtype=float)[None, :]
    m = np.asarray(m, dtype=float)[:, None]
    lam_w = np.asarray(lam_w, dtype=float)[:, None]
    return _poisson_log_term(k / m - 1.0, lam_w)


def log_likelihood_term(kappa: float, m: MeasurementPair, w: float, cfg: EstimatorConfig,
                        c_avg: float | None = None) -> float:
    c_avg = cfg.c_avg_client if c_avg is None else c_avg
    is1 = classify_case(m, cfg.case_tolerance) is Case.CASE1
    if is1 and c_avg is None:
        raise ValueError("a Case-1 term needs the average client rate")
    val = dual_probe_terms([kappa], [m.m1], [m.m2], [cfg.lambda_s * w],
                           1.0 if c_avg is None else c_avg, [is1])
    return float(val[0, 0])


def diprober_o_estimate(m: MeasurementPair, w: float, cfg: EstimatorConfig,
                        c_avg: float | None = None) -> float:
    """One-round closed form, clamped to the grid range.

    Case 1: expected client usage plus the unused capacity, ``lambda w c_avg + 2 m2``.
    Case 2: ``m2 (lambda w + 2)``.
    """
    c_avg = cfg.c_avg_client if c_avg is None else c_avg
    est = diprober_o_estimates(np.array([m.m1]), np.array([m.m2]), np.array([w]), cfg,
                               np.nan if c_avg is None else c_avg)
    return float(est[0])


def diprober_o_estimates(m1: np.ndarray, m2: np.ndarray, w: np.ndarray, cfg: EstimatorConfig,
                         c_avg) -> np.ndarray:
    lam_w = cfg.lambda_s * np.asarray(w, dtype=float)
    is1 = case1_mask(m1, m2, cfg.case_tolerance)
    if np.any(is1 & np.isnan(np.broadcast_to(np.asarray(c_avg, dtype=float), lam_w.shape))):
        raise ValueError("a Case-1 estimate needs the average client rate")
    m2 = np.asarray(m2, dtype=float)
    est = np.where(is1, lam_w * c_avg + 2.0 * m2, m2 * (lam_w + 2.0))
    return cfg.grid.clamp(est)


def diprober_wh_update(table: LikelihoodTable, m1: np.ndarray, m2: np.ndarray, w: np.ndarray,
                       cfg: EstimatorConfig, previous: np.ndarray, c_avg=None
                       ) -> tuple[LikelihoodTable, EstimateUpdate]:
    c_avg = cfg.c_avg_client if c_avg is None else c_avg
    is1 = case1_mask(m1, m2, cfg.case_tolerance)
    if c_avg is None:
        if is1.any():
            raise ValueError("a Case-1 term needs the average client rate")
        c_avg = 1.0
    terms = dual_probe_terms(cfg.grid.centers, m1, m2, cfg.lambda_s * np.asarray(w, dtype=float),
                             c_avg, is1)
    table.accumulate(terms)
    est, fallback = table.argmax_estimates(cfg.grid, np.asarray(previous, dtype=float))
    return table, EstimateUpdate(est, fallback)


def mleflow_q_update(table: LikelihoodTable, m1: np.ndarray, w: np.ndarray, cfg: EstimatorConfig,
                     previous: np.ndarray) -> tuple[LikelihoodTable, EstimateUpdate]:
    terms = single_probe_terms(cfg.grid.centers, m1, cfg.lambda_s * np.asarray(w, dtype=float))
    table.accumulate(terms)
    est, fallback = table.argmax_estimates(cfg.grid, np.asarray(previous, dtype=float))
    return table, EstimateUpdate(est, fallback)


def _mean_measurement(m: np.ndarray) -> float:
    mbar = float(np.mean(m))
    if not mbar > 0:
        raise ValueError("average measured bandwidth is zero; the network carries no probe traffic")
    return mbar


def torflow_p_update(prev_estimates: np.ndarray, measured: np.ndarray, kp: float = 1.0) -> np.ndarray:
    """Proportional controller: ``C * (1 + kp * (m - mbar) / mbar)``; ``C * m / mbar`` at kp = 1."""
    prev = np.asarray(prev_estimates, dtype=float)
    if np.any(prev <= 0):
        raise ValueError("TorFlow-P needs positive previous estimates")
    m = np.asarray(measured, dtype=float)
    mbar = _mean_measurement(m)
    return prev * (1.0 + kp * (m - mbar) / mbar)


def sbws_update(observed: np.ndarray, measured: np.ndarray) -> np.ndarray:
    m = np.asarray(measured, dtype=float)
    return np.asarray(observed, dtype=float) * m / _mean_measurement(m)


def lambert_w0(x: float) -> float:
    """Principal branch of the Lambert W function by Halley iteration."""
    x = float(x)
    branch = -1.0 / math.e
    if math.isnan(x) or x < branch - 1e-15:
        raise ValueError(f"lambert_w0 is real only for x >= -1/e, got {x}")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf
    if x < -0.25:
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
        if p < 1e-7:
            return w
    elif x < 3.0:
        w = math.log1p(x)
    else:
        lx = math.log(x)
        w = lx - math.log(lx)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= 1e-15 * (1.0 + abs(w)):
            break
    return w


def diprober_wh_analytic_case2(m2_history: Sequence[float], w_history: Sequence[float], lambda_s: float,
                               m1_history: Sequence[float] | None = None, tol: float = 0.05) -> float:
    """Stationary point of the Stirling-approximated full-history Case-2 likelihood.

    With ``S = sum 1/m_i`` and ``A = sum log(m_i lambda w_i) / m_i`` over
    ``t + 1`` rounds the estimate is ``2(t+1)/S / W0(2(t+1)/S * exp(-A/S))``.
    """
    m = np.asarray(m2_history, dtype=float)
    w = np.asarray(w_history, dtype=float)
    if m.size == 0 or m.shape != w.shape:
        raise ValueError("need equally long, non-empty m2 and weight histories")
    if np.any(m <= 0) or np.any(w <= 0):
        raise ValueError("measurements and weights must be positive")
    if m1_history is not None:
        bad = np.flatnonzero(case1_mask(m1_history, m, tol))
        if bad.size:
            raise ValueError(f"round(s) {bad.tolist()} are Case 1; the closed form covers Case 2 only")
    inv = 1.0 / m
    s = inv.sum()
    a = float(np.sum(inv * np.log(m * lambda_s * w)))
    scale = 2.0 * m.size / s
    return scale / lambert_w0(scale * math.exp(-a / s))
