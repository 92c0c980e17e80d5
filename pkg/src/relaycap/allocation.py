"""Max-min fair bandwidth allocation and the sequential dual-probe measurement.

Flows are stored as a padded integer matrix: row ``f`` lists the relays
flow ``f`` traverses, with ``-1`` filling unused slots. Client flows cross
three relays (four in under-loaded mode, where the last one is a private
virtual relay enforcing the client's cap); probe flows cross one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .network import PathSet

TOL = 1e-9


@dataclass(frozen=True)
class AllocationProblem:
    capacities: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        caps = np.asarray(self.capacities, dtype=float)
        flows = np.asarray(self.flows, dtype=np.int64)
        if flows.ndim != 2:
            flows = flows.reshape(len(flows), -1) if flows.size else np.zeros((0, 1), np.int64)
        if np.any(caps <= 0):
            raise ValueError("relay capacities must be positive")
        if flows.size:
            if np.any(flows >= len(caps)) or np.any(flows < -1):
                raise ValueError("flow references an unknown relay")
            if np.any((flows >= 0).sum(axis=1) == 0):
                raise ValueError("every flow must traverse at least one relay")
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "flows", flows)

    @classmethod
    def from_flows(cls, capacities: Sequence[float], flows: Iterable[Iterable[int]]) -> "AllocationProblem":
        rows = [sorted(set(int(r) for r in f)) for f in flows]
        width = max((len(r) for r in rows), default=1)
        mat = np.full((len(rows), width), -1, dtype=np.int64)
        for i, r in enumerate(rows):
            mat[i, :len(r)] = r
        return cls(np.asarray(capacities, dtype=float), mat)

    @property
    def n_flows(self) -> int:
        return self.flows.shape[0]


@dataclass(frozen=True)
class AllocationResult:
    flow_rates: np.ndarray
    relay_loads: np.ndarray


@dataclass(frozen=True)
class MeasurementPair:
    m1: float
    m2: float


@dataclass(frozen=True)
class RoundLoad:
    client_flow_count: np.ndarray
    client_throughput: np.ndarray


@dataclass(frozen=True)
class RoundMeasurement:
    """Everything the dual-probe procedure observes in one round."""

    m1: np.ndarray
    m2: np.ndarray
    load: RoundLoad
    client_rates: np.ndarray
    relay_throughput: np.ndarray

    def pairs(self) -> list[MeasurementPair]:
        return [MeasurementPair(float(a), float(b)) for a, b in zip(self.m1, self.m2)]


def relay_loads(flows: np.ndarray, rates: np.ndarray, n_relays: int) -> np.ndarray:
    valid = flows >= 0
    idx = flows[valid]
    w = np.broadcast_to(rates[:, None], flows.shape)[valid]
    return np.bincount(idx, weights=w, minlength=n_relays)


def maxmin_allocate(problem: AllocationProblem) -> AllocationResult:
    """Progressive filling with analytically computed saturation events.

    All unfrozen flows share one water level. A relay with residual capacity
    ``r`` and ``k`` unfrozen flows saturates at level ``r / k``. Every relay
    whose level is the smallest among the relays of each of its flows
    saturates exactly at that level, so all such relays are frozen in one
    step; this keeps the private cap relays of under-loaded mode from costing
    one iteration each.
    """
    caps = problem.capacities
    flows = problem.flows
    n_r, n_f = len(caps), problem.n_flows
    rates = np.zeros(n_f)
    if n_f == 0:
        return AllocationResult(rates, np.zeros(n_r))

    valid = flows >= 0
    safe = np.where(valid, flows, 0)
    frozen_load = np.zeros(n_r)
    active = np.ones(n_f, dtype=bool)

    while active.any():
        sub, sub_valid, sub_safe = flows[active], valid[active], safe[active]
        counts = np.bincount(sub[sub_valid], minlength=n_r)
        with np.errstate(divide="ignore", invalid="ignore"):
            level = np.where(counts > 0, (caps - frozen_load) / counts, np.inf)
        level = np.maximum(level, 0.0)
        flow_lv = np.where(sub_valid, level[sub_safe], np.inf)
        flow_min = flow_lv.min(axis=1)
        # A relay that is not the tightest constraint of one of its flows may
        # see that flow freeze early; it cannot join this batch.
        blocked = sub_valid & (flow_lv > flow_min[:, None] + TOL)
        cutoff = flow_lv[blocked].min() if blocked.any() else np.inf
        batch = level < cutoff
        hit = (sub_valid & batch[sub_safe]).any(axis=1)
        if not hit.any():  # pragma: no cover - cutoff always exceeds the minimum level
            raise RuntimeError("water-filling made no progress")
        idx = np.flatnonzero(active)[hit]
        rates[idx] = flow_min[hit]
        frozen_load += relay_loads(flows[idx], rates[idx], n_r)
        active[idx] = False

    return AllocationResult(rates, relay_loads(flows, rates, n_r))


def client_flow_matrix(paths: PathSet, n_relays: int) -> tuple[np.ndarray, np.ndarray]:
    """Client flow rows plus the capacities of any private cap relays."""
    rows = paths.relay_matrix()
    if paths.caps is None:
        return rows, np.zeros(0)
    virtual = n_relays + np.arange(len(paths), dtype=np.int64)
    return np.hstack([rows, virtual[:, None]]), np.asarray(paths.caps, dtype=float)


def measure_relay_pair(paths: PathSet, capacities: Sequence[float]) -> RoundMeasurement:
    """Run the probe-free allocation and the two probing passes.

    Pass 1 attaches one single-relay probe to every relay at once and reads
    each probe's rate as ``m1``. Pass 2 keeps those probes, adds a second one
    per relay, and reads the second probe's rate as ``m2``. Client flows are
    re-allocated in each pass.
    """
    caps = np.asarray(capacities, dtype=float)
    n = len(caps)
    clients, virtual_caps = client_flow_matrix(paths, n)
    all_caps = np.concatenate([caps, virtual_caps])
    width = clients.shape[1] if len(clients) else 1
    n_c = len(clients)

    probe = np.full((n, width), -1, dtype=np.int64)
    probe[:, 0] = np.arange(n)

    base = maxmin_allocate(AllocationProblem(all_caps, clients.reshape(n_c, width)))
    pass1 = maxmin_allocate(AllocationProblem(all_caps, np.vstack([clients.reshape(n_c, width), probe])))
    pass2 = maxmin_allocate(AllocationProblem(all_caps, np.vstack([clients.reshape(n_c, width), probe, probe])))

    m1 = pass1.flow_rates[n_c:n_c + n]
    m2 = pass2.flow_rates[n_c + n:n_c + 2 * n]

    real = clients[:, :3] if n_c else np.zeros((0, 3), dtype=np.int64)
    count = np.bincount(real.ravel(), minlength=n)[:n]
    throughput = relay_loads(real, base.flow_rates, n)[:n] if n_c else np.zeros(n)
    observed = np.maximum.reduce([base.relay_loads[:n], pass1.relay_loads[:n], pass2.relay_loads[:n]])
    return RoundMeasurement(m1.copy(), m2.copy(), RoundLoad(count, throughput),
                            base.flow_rates.copy(), observed)
