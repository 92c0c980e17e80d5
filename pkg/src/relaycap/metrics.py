"""Relative-error and path-bandwidth statistics, and CSV/JSON export.

Standard deviations use the population convention (``ddof=0``) throughout:
each round's aggregate describes the relays or flows actually present, not
a sample from a larger set.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import ConsensusRound, Network, RelayClass, compute_weights

ROUNDS_HEADER = ["round", "relay_id", "class", "true_capacity_kbps", "weight_exit", "weight_guard",
                 "weight_middle", "m1_kbps", "m2_kbps", "estimate_kbps", "rel_error"]
SIG_DIGITS = 9


def fmt(x: float) -> str:
    return f"{float(x):.{SIG_DIGITS}g}"


def rounded(x: float | None) -> float | None:
    """The value a reader recovers from the serialized form."""
    if x is None:
        return None
    return float(fmt(x))


@dataclass(frozen=True)
class RoundStat:
    round: int
    mean: float | None
    std: float | None
    max: float | None
    min: float | None

    @classmethod
    def of(cls, t: int, values: np.ndarray) -> "RoundStat":
        if values.size == 0:
            # Nothing to aggregate; all fields None marks the round as empty.
            return cls(t, None, None, None, None)
        return cls(t, float(values.mean()), float(values.std()), float(values.max()), float(values.min()))

    @property
    def empty(self) -> bool:
        return self.mean is None

    def as_dict(self) -> dict:
        return {"round": self.round, "mean": rounded(self.mean), "std": rounded(self.std),
                "max": rounded(self.max), "min": rounded(self.min)}


@dataclass(frozen=True)
class ErrorStats:
    per_class: dict[str, list[RoundStat]]

    def final(self, cls: str) -> RoundStat:
        return self.per_class[cls][-1]


@dataclass(frozen=True)
class PathBandwidthStats:
    per_round: list[RoundStat]


def ideal_weights(network: Network) -> ConsensusRound:
    """Weights a consensus built on the true capacities would publish."""
    return compute_weights(network.capacities, network)


def relative_error(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(estimate, dtype=float) - truth) / truth


def error_stats_from_arrays(rounds: Sequence[int], classes: Sequence[str],
                            rel_errors: Iterable[np.ndarray]) -> ErrorStats:
    labels = np.asarray(classes)
    per_class: dict[str, list[RoundStat]] = {c.value: [] for c in RelayClass}
    for t, err in zip(rounds, rel_errors):
        for name, series in per_class.items():
            series.append(RoundStat.of(t, np.asarray(err)[labels == name]))
    return ErrorStats(per_class)


def compute_error_stats(records, network: Network) -> ErrorStats:
    return error_stats_from_arrays([r.round for r in records], network.class_labels(),
                                   (relative_error(r.estimate, network.capacities) for r in records))


def compute_path_stats(records) -> PathBandwidthStats:
    return PathBandwidthStats([RoundStat.of(r.round, np.asarray(r.path_rates)) for r in records])


def rounds_csv(records, network: Network) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUNDS_HEADER)
    labels = network.class_labels()
    truth = network.capacities
    for r in records:
        err = relative_error(r.estimate, truth)
        for j in range(network.n):
            w.writerow([r.round, j, labels[j], fmt(truth[j]), fmt(r.weight_exit[j]), fmt(r.weight_guard[j]),
                        fmt(r.weight_middle[j]), fmt(r.m1[j]), fmt(r.m2[j]), fmt(r.estimate[j]), fmt(err[j])])
    return buf.getvalue()


def summary_dict(method: str, seed: int, errors: ErrorStats, paths: PathBandwidthStats) -> dict:
    return {
        "method": method,
        "seed": seed,
        "rounds": len(paths.per_round),
        "per_class": {k: [s.as_dict() for s in v] for k, v in errors.per_class.items()},
        "path_bw": [s.as_dict() for s in paths.per_round],
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary sibling so readers never see a partial file."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export(records, network: Network, out_dir: str | Path, method: str, seed: int,
           errors: ErrorStats | None = None, paths: PathBandwidthStats | None = None) -> dict[str, Path]:
    """Write ``rounds.csv`` and ``summary.json``; returns their paths."""
    out = Path(out_dir)
    errors = errors or compute_error_stats(records, network)
    paths = paths or compute_path_stats(records)
    csv_text = rounds_csv(records, network)
    summary_text = dumps(summary_dict(method, seed, errors, paths))
    files = {"rounds.csv": out / "rounds.csv", "summary.json": out / "summary.json"}
    atomic_write(files["rounds.csv"], csv_text)
    atomic_write(files["summary.json"], summary_text)
    return files


def read_rounds_csv(path: str | Path) -> tuple[list[int], list[str], list[np.ndarray]]:
    """Parse ``rounds.csv`` back into (rounds, relay classes, per-round relative errors)."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROUNDS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    by_round: dict[int, dict[int, tuple[str, float]]] = {}
    for row in rows:
        by_round.setdefault(int(row["round"]), {})[int(row["relay_id"])] = (row["class"], float(row["rel_error"]))
    rounds = sorted(by_round)
    if not rounds:
        return [], [], []
    ids = sorted(by_round[rounds[0]])
    classes = [by_round[rounds[0]][j][0] for j in ids]
    errs = [np.array([by_round[t][j][1] for j in ids]) for t in rounds]
    return rounds, classes, errs


def stats_close(a: RoundStat, b: RoundStat, tol: float = 1e-12) -> bool:
    if a.empty or b.empty:
        return a.empty and b.empty and a.round == b.round
    return a.round == b.round and all(
        math.isclose(x, y, rel_tol=tol, abs_tol=tol) for x, y in
        ((a.mean, b.mean), (a.std, b.std), (a.max, b.max), (a.min, b.min)))
