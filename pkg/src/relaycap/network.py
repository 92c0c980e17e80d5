"""Relay population, consensus weights and weighted path construction.

Capacities are in kb/s throughout. A relay belongs to exactly one class;
relays that carry both the Exit and Guard flags are counted as exits.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path as FsPath
from typing import Iterator, Mapping, Sequence

import numpy as np

MAX_REDRAWS = 1000

# Relative class totals (guard, middle, exit) of the June 2020 Tor network,
# 42.6e6 / 6.7e6 / 17.7e6 kb/s.
TOR_CLASS_TOTALS = {"guard": 42.6, "middle": 6.7, "exit": 17.7}


class RelayClass(enum.Enum):
    GUARD = "guard"
    MIDDLE = "middle"
    EXIT = "exit"

    @classmethod
    def parse(cls, text: str) -> "RelayClass":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown relay class {text!r} (expected one of {valid})") from None


@dataclass(frozen=True)
class Relay:
    id: int
    cls: RelayClass
    true_capacity: float
    observed_bw_window: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.true_capacity > 0:
            raise ValueError(f"relay {self.id}: capacity must be positive, got {self.true_capacity}")
        if any(b < 0 for b in self.observed_bw_window):
            raise ValueError(f"relay {self.id}: negative observed bandwidth")


@dataclass(frozen=True)
class Network:
    relays: tuple[Relay, ...]

    def __post_init__(self):
        ids = sorted(r.id for r in self.relays)
        if ids != list(range(len(self.relays))):
            raise ValueError("relay ids must be a permutation of 0..n-1")
        object.__setattr__(self, "relays", tuple(sorted(self.relays, key=lambda r: r.id)))

    @property
    def n(self) -> int:
        return len(self.relays)

    @cached_property
    def capacities(self) -> np.ndarray:
        return np.array([r.true_capacity for r in self.relays], dtype=float)

    def mask(self, cls: RelayClass) -> np.ndarray:
        return np.array([r.cls is cls for r in self.relays], dtype=bool)

    @cached_property
    def guards(self) -> np.ndarray:
        return self.mask(RelayClass.GUARD)

    @cached_property
    def middles(self) -> np.ndarray:
        return self.mask(RelayClass.MIDDLE)

    @cached_property
    def exits(self) -> np.ndarray:
        return self.mask(RelayClass.EXIT)

    def class_labels(self) -> list[str]:
        return [r.cls.value for r in self.relays]

    @classmethod
    def from_arrays(cls, classes: Sequence[RelayClass | str], capacities: Sequence[float]) -> "Network":
        if len(classes) != len(capacities):
            raise ValueError("classes and capacities differ in length")
        relays = []
        for i, (c, cap) in enumerate(zip(classes, capacities)):
            c = c if isinstance(c, RelayClass) else RelayClass.parse(c)
            relays.append(Relay(i, c, float(cap)))
        return cls(tuple(relays))


@dataclass(frozen=True)
class ConsensusRound:
    """Published estimates of one round and the selection weights derived from them."""

    round_index: int
    estimates: np.ndarray
    weight_exit: np.ndarray
    weight_guard: np.ndarray
    weight_middle: np.ndarray
    w_mg: float

    @property
    def effective_weight(self) -> np.ndarray:
        """Probability that a sampled path includes each relay.

        A middle draw that hits the path's guard is repeated, so given guard
        ``g`` the middle is drawn from ``w^m`` restricted to relays other than
        ``g``. A relay appears at most once per path, so a Poisson number of
        paths puts a Poisson number of flows on it with mean ``lambda_s``
        times this value.
        """
        wg, wm = self.weight_guard, self.weight_middle
        rest = 1.0 - wm
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(wg > 0, wg / rest, 0.0)
        middle = wm * (ratio.sum() - ratio)
        return self.weight_exit + wg + middle


@dataclass(frozen=True)
class Path:
    guard_id: int
    middle_id: int
    exit_id: int
    cap_relay_capacity: float | None = None


@dataclass(frozen=True)
class PathSet:
    """Column-oriented batch of paths; iterating yields :class:`Path` values."""

    guard: np.ndarray
    middle: np.ndarray
    exit: np.ndarray
    caps: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.guard)

    def __iter__(self) -> Iterator[Path]:
        for i in range(len(self)):
            cap = None if self.caps is None else float(self.caps[i])
            yield Path(int(self.guard[i]), int(self.middle[i]), int(self.exit[i]), cap)

    def relay_matrix(self) -> np.ndarray:
        return np.stack([self.guard, self.middle, self.exit], axis=1).astype(np.int64)


def compute_weights(estimates: Sequence[float], network: Network, round_index: int = 0) -> ConsensusRound:
    """Proportional selection weights for the exit, guard and middle positions.

    Guards are admitted to the middle position scaled by
    ``W_mg = (sum_G C - sum_M C) / (2 sum_G C)``, clamped to [0, 1].
    """
    c = np.asarray(estimates, dtype=float)
    if c.shape != (network.n,):
        raise ValueError(f"expected {network.n} estimates, got shape {c.shape}")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("estimates must be finite and non-negative")
    g, m, e = network.guards, network.middles, network.exits
    sum_g, sum_m, sum_e = c[g].sum(), c[m].sum(), c[e].sum()
    for name, total, present in (("guard", sum_g, g.any()), ("exit", sum_e, e.any())):
        if not total > 0:
            raise ValueError(f"degenerate consensus: total {name} estimate is {total}" +
                             ("" if present else " (no relays of that class)"))

    w_mg = float(np.clip((sum_g - sum_m) / (2.0 * sum_g), 0.0, 1.0))
    w_exit = np.where(e, c, 0.0) / sum_e
    w_guard = np.where(g, c, 0.0) / sum_g
    middle_mass = np.where(g, w_mg * c, 0.0) + np.where(m, c, 0.0)
    total_mid = middle_mass.sum()
    if not total_mid > 0:
        raise ValueError("degenerate consensus: no middle-position capacity")
    w_middle = middle_mass / total_mid
    return ConsensusRound(round_index, c.copy(), w_exit, w_guard, w_middle, w_mg)


def sample_user_count(lambda_s: float, rng: np.random.Generator) -> int:
    if lambda_s < 0:
        raise ValueError("lambda_s must be non-negative")
    return int(rng.poisson(lambda_s))


def sample_paths(count: int, weights: ConsensusRound, rng: np.random.Generator,
                 underloaded: bool = False, cap_range: tuple[float, float] = (64.0, 144.0)) -> PathSet:
    """Draw ``count`` guard/middle/exit triples independently by weight.

    A middle that coincides with the path's guard is re-drawn. Guards and
    exits are disjoint classes, so that is the only possible collision.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    exits = _draw(rng, weights.weight_exit, count)
    guards = _draw(rng, weights.weight_guard, count)
    middles = _draw(rng, weights.weight_middle, count)
    clash = np.flatnonzero(middles == guards)
    attempts = 0
    while clash.size and attempts < MAX_REDRAWS:
        attempts += 1
        middles[clash] = _draw(rng, weights.weight_middle, clash.size)
        clash = clash[middles[clash] == guards[clash]]
    # A middle weight concentrated on one guard can outlast the redraws. The
    # redraw loop converges to w^m with that guard excluded, so draw from it.
    for i in clash:
        p = weights.weight_middle.copy()
        p[guards[i]] = 0.0
        if not p.sum() > 0:
            raise RuntimeError(
                f"could not draw distinct guard/middle after {MAX_REDRAWS} attempts: guard {guards[i]} "
                f"is the only relay with middle-position weight")
        middles[i] = _draw(rng, p, 1)[0]
    caps = None
    if underloaded:
        lo, hi = cap_range
        if lo > hi:
            raise ValueError("cap_range must be (min, max) with min <= max")
        caps = rng.uniform(lo, hi, size=count)
    return PathSet(guards, middles, exits, caps)


def _draw(rng: np.random.Generator, p: np.ndarray, size: int) -> np.ndarray:
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(size), side="right").astype(np.int64)


def synthetic_network(counts: Mapping[str, int], rng: np.random.Generator,
                      cap_range: tuple[float, float] = (100.0, 169000.0),
                      class_totals: Mapping[str, float] | None = TOR_CLASS_TOTALS) -> Network:
    """Log-uniform capacities per class.

    With ``class_totals`` set, each class is rescaled so the class sums keep
    those proportions while the overall total is unchanged.
    """
    lo, hi = cap_range
    if not 0 < lo <= hi:
        raise ValueError("cap_range must satisfy 0 < min <= max")
    classes: list[RelayClass] = []
    caps: list[np.ndarray] = []
    for cls in RelayClass:
        k = int(counts.get(cls.value, 0))
        if k < 0:
            raise ValueError(f"negative relay count for {cls.value}")
        classes += [cls] * k
        caps.append(np.exp(rng.uniform(np.log(lo), np.log(hi), size=k)))
    if class_totals:
        grand = sum(c.sum() for c in caps)
        share_sum = sum(class_totals[cls.value] for cls, c in zip(RelayClass, caps) if c.size)
        caps = [c * (grand * class_totals[cls.value] / share_sum / c.sum()) if c.size else c
                for cls, c in zip(RelayClass, caps)]
    return Network.from_arrays(classes, np.concatenate(caps))


def load_relays_csv(path: str | FsPath) -> Network:
    """Read ``relay_id,class,capacity_kbps`` rows."""
    path = FsPath(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["relay_id", "class", "capacity_kbps"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        relays = []
        for lineno, row in enumerate(reader, start=2):
            try:
                relays.append(Relay(int(row["relay_id"]), RelayClass.parse(row["class"]),
                                    float(row["capacity_kbps"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return Network(tuple(relays))


def write_relays_csv(network: Network, path: str | FsPath) -> None:
    with FsPath(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relay_id", "class", "capacity_kbps"])
        for r in network.relays:
            w.writerow([r.id, r.cls.value, repr(float(r.true_capacity))])
