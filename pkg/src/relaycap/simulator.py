"""Synchronous round loop: users pick paths, probes measure, estimators publish.

Each round draws a Poisson number of users, builds their paths from the
current weights, allocates bandwidth max-min fairly (once without probes,
then with one and with two probes per relay), updates the capacity
estimates with the configured method, and recomputes the weights. All
paths are dropped at the end of a round.
"""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import truncnorm

from .allocation import measure_relay_pair
from .estimators import (
    EstimatorConfig,
    EstimatorKind,
    LikelihoodTable,
    QuantizationGrid,
    diprober_o_estimates,
    diprober_wh_update,
    mleflow_q_update,
    sbws_update,
    torflow_p_update,
)
from .network import ConsensusRound, Network, compute_weights, sample_paths, sample_user_count

log = logging.getLogger(__name__)

KBYTE = 8.0  # kb per KB


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative measurement noise, truncated normal around 1."""

    std: float = 0.05
    y_min: float = 0.7
    y_max: float = 1.3

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("noise std must be positive")
        if not self.y_min <= 1.0 <= self.y_max:
            raise ValueError("noise bounds must bracket 1")

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        a = (self.y_min - 1.0) / self.std
        b = (self.y_max - 1.0) / self.std
        return truncnorm.rvs(a, b, loc=1.0, scale=self.std, size=size, random_state=rng)


@dataclass(frozen=True)
class SimConfig:
    lambda_s: float = 5000.0
    rounds: int = 50
    method: EstimatorKind = EstimatorKind.DIPROBER_WH
    seed: int = 0
    underloaded: bool = False
    cap_range: tuple[float, float] = (8 * KBYTE, 18 * KBYTE)
    noise: NoiseModel | None = None
    quant_base: float = 1.1
    case_tolerance: float = 0.05
    c_avg_client: float | None = None
    kp: float = 1.0
    window: int = 5
    grid: QuantizationGrid | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be non-negative")
        if self.cap_range[0] > self.cap_range[1]:
            raise ValueError("cap_range min exceeds max")
        if self.window < 1:
            raise ValueError("window must be at least 1")

    def estimator_config(self, network: Network) -> EstimatorConfig:
        grid = self.grid or QuantizationGrid.for_capacities(network.capacities, self.quant_base)
        return EstimatorConfig(self.lambda_s, grid, self.c_avg_client, self.case_tolerance, self.kp)


@dataclass
class RoundRecord:
    round: int
    user_count: int
    true_capacity: np.ndarray
    weight_exit: np.ndarray
    weight_guard: np.ndarray
    weight_middle: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    client_flow_count: np.ndarray
    client_throughput: np.ndarray
    # Estimate published after this round's measurements.
    estimate: np.ndarray
    path_rates: np.ndarray
    c_avg: float
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def weight(self) -> np.ndarray:
        return self.weight_exit + self.weight_guard + self.weight_middle


def trial_streams(seed: int, trial: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (traffic, noise) streams for one trial."""
    ss = np.random.SeedSequence(seed, spawn_key=(0, trial))
    traffic, noise = ss.spawn(2)
    return np.random.Generator(np.random.Philox(traffic)), np.random.Generator(np.random.Philox(noise))


def initial_estimates(network: Network, cfg: SimConfig, est_cfg: EstimatorConfig) -> np.ndarray:
    if cfg.method is EstimatorKind.ACTUAL:
        return network.capacities.copy()
    return np.full(network.n, est_cfg.grid.midpoint)


def run_simulation(network: Network, cfg: SimConfig, trial: int = 0) -> list[RoundRecord]:
    est_cfg = cfg.estimator_config(network)
    rng, noise_rng = trial_streams(cfg.seed, trial)
    truth = network.capacities
    estimates = initial_estimates(network, cfg, est_cfg)
    consensus = compute_weights(estimates, network, 0)
    table = LikelihoodTable.empty(network.n, est_cfg.grid) if cfg.method in (
        EstimatorKind.DIPROBER_WH, EstimatorKind.MLEFLOW_Q) else None
    observed = deque(maxlen=cfg.window)
    c_avg = cfg.c_avg_client if cfg.c_avg_client is not None else 1.0
    records = []

    for t in range(cfg.rounds):
        try:
            users = sample_user_count(cfg.lambda_s, rng)
            paths = sample_paths(users, consensus, rng, cfg.underloaded, cfg.cap_range)
            meas = measure_relay_pair(paths, truth)
            m1, m2 = meas.m1, meas.m2
            if cfg.noise is not None:
                y = cfg.noise.draw(noise_rng, (2, network.n))
                m1, m2 = m1 * y[0], m2 * y[1]
            observed.append(meas.relay_throughput)
            if cfg.c_avg_client is None and users:
                c_avg = float(meas.client_rates.mean())
            new, fallback = _update(cfg.method, est_cfg, table, estimates, consensus, m1, m2,
                                    np.max(np.stack(observed), axis=0), c_avg, truth)
            if fallback.any():
                log.warning("round %d: %d relay(s) had no feasible bin; kept previous estimate",
                            t, int(fallback.sum()))
            records.append(RoundRecord(
                t, users, truth, consensus.weight_exit, consensus.weight_guard, consensus.weight_middle,
                m1, m2, meas.load.client_flow_count, meas.load.client_throughput, new,
                meas.client_rates, c_avg, fallback))
            estimates = new
            consensus = compute_weights(estimates, network, t + 1)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            raise SimulationError(f"round {t} ({cfg.method.value}): {exc}") from exc
    return records


def _update(method: EstimatorKind, est_cfg: EstimatorConfig, table: LikelihoodTable | None,
            estimates: np.ndarray, consensus: ConsensusRound, m1: np.ndarray, m2: np.ndarray,
            observed: np.ndarray, c_avg: float, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    none = np.zeros(len(estimates), dtype=bool)
    w = consensus.effective_weight
    if method is EstimatorKind.ACTUAL:
        return truth.copy(), none
    if method is EstimatorKind.TORFLOW_P:
        return torflow_p_update(estimates, m1, est_cfg.kp), none
    if method is EstimatorKind.SBWS:
        return sbws_update(observed, m1), none
    if method is EstimatorKind.DIPROBER_O:
        return diprober_o_estimates(m1, m2, w, est_cfg, c_avg), none
    if method is EstimatorKind.DIPROBER_WH:
        _, upd = diprober_wh_update(table, m1, m2, w, est_cfg, estimates, c_avg)
        return upd.estimates, upd.fallback
    if method is EstimatorKind.MLEFLOW_Q:
        _, upd = mleflow_q_update(table, m1, w, est_cfg, estimates)
        return upd.estimates, upd.fallback
    raise ValueError(f"unsupported method {method}")  # pragma: no cover


@dataclass
class MonteCarloResult:
    trials: list[list[RoundRecord]]
    mean: np.ndarray
    variance: np.ndarray

    @property
    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance / len(self.trials))


def _run_trial(args):
    network, cfg, trial = args
    return run_simulation(network, cfg, trial)


def run_monte_carlo(network: Network, cfg: SimConfig, trials: int, workers: int = 1) -> MonteCarloResult:
    """Independent replications; trial ``i`` draws from streams keyed by ``(seed, i)``.

    Per (round, relay) the result holds the sample mean and the sample
    variance (ddof=1; zero for a single trial) of the published estimates.
    Output does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    jobs = [(network, cfg, i) for i in range(trials)]
    if workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_trial, jobs))
    else:
        runs = [_run_trial(j) for j in jobs]
    est = np.array([[r.estimate for r in run] for run in runs])  # trials x rounds x relays
    var = est.var(axis=0, ddof=1) if trials > 1 else np.zeros(est.shape[1:])
    return MonteCarloResult(runs, est.mean(axis=0), var)


def with_method(cfg: SimConfig, method: EstimatorKind | str, **changes) -> SimConfig:
    if isinstance(method, str):
        method = EstimatorKind.parse(method)
    return replace(cfg, method=method, **changes)
