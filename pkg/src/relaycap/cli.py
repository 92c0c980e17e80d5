"""Command-line entry point: ``relaycap`` / ``python -m relaycap``.

Configuration is one JSON document whose keys mirror the simulator
settings; command-line flags override it. Every run writes a
``manifest.json`` that can be passed back through ``--config`` to repeat
the run exactly.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .estimators import EstimatorKind
from .metrics import atomic_write, compute_error_stats, dumps, export, fmt, relative_error, rounded, RoundStat
from .network import Network, RelayClass, load_relays_csv, synthetic_network
from .simulator import KBYTE, NoiseModel, SimConfig, SimulationError, run_monte_carlo, run_simulation

log = logging.getLogger("relaycap")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = EstimatorKind.DIPROBER_WH.value
    rounds: int = 50
    seed: int = 0
    lambda_s: float = 5000.0
    underloaded: bool = False
    cap_min: float = 8 * KBYTE
    cap_max: float = 18 * KBYTE
    noise: bool = False
    noise_std: float = 0.05
    noise_min: float = 0.7
    noise_max: float = 1.3
    quant_base: float = 1.1
    case_tolerance: float = 0.05
    c_avg_client: float | None = None
    kp: float = 1.0
    window: int = 5
    trials: int = 1
    workers: int = 1
    relays: str | None = None
    population: dict[str, int] = field(default_factory=lambda: {"guard": 24, "middle": 22, "exit": 14})
    population_range: list[float] = field(default_factory=lambda: [100.0, 169000.0])

    def sim_config(self) -> SimConfig:
        noise = NoiseModel(self.noise_std, self.noise_min, self.noise_max) if self.noise else None
        return SimConfig(
            lambda_s=self.lambda_s, rounds=self.rounds, method=EstimatorKind.parse(self.method),
            seed=self.seed, underloaded=self.underloaded, cap_range=(self.cap_min, self.cap_max),
            noise=noise, quant_base=self.quant_base, case_tolerance=self.case_tolerance,
            c_avg_client=self.c_avg_client, kp=self.kp, window=self.window)


_INT_KEYS = {"rounds", "seed", "window", "trials", "workers"}
_FLOAT_KEYS = {"lambda_s", "cap_min", "cap_max", "noise_std", "noise_min", "noise_max", "quant_base",
               "case_tolerance", "kp"}
_BOOL_KEYS = {"underloaded", "noise"}


def _check_value(key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS or key == "c_avg_client":
        if value is None and key == "c_avg_client":
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key == "method":
        if not isinstance(value, str):
            raise ConfigError(f"method: expected a string, got {value!r}")
        try:
            return EstimatorKind.parse(value).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if key == "relays":
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"relays: expected a file path, got {value!r}")
        return value
    if key == "population":
        if not isinstance(value, dict):
            raise ConfigError("population: expected an object of relay counts per class")
        valid = {c.value for c in RelayClass}
        unknown = set(value) - valid
        if unknown:
            raise ConfigError(f"population: unknown class(es) {sorted(unknown)}; expected {sorted(valid)}")
        for k, v in value.items():
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"population.{k}: expected a non-negative integer, got {v!r}")
        return {c.value: int(value.get(c.value, 0)) for c in RelayClass}
    if key == "population_range":
        if (not isinstance(value, list) or len(value) != 2 or
                not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            raise ConfigError("population_range: expected [min, max] in kb/s")
        return [float(v) for v in value]
    raise ConfigError(f"unknown config key {key!r}")  # pragma: no cover


def config_from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    valid = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(sorted(valid))}")
    cfg = base or RunConfig()
    for key, value in data.items():
        setattr(cfg, key, _check_value(key, value))
    return cfg


def load_config_file(path: str | Path) -> tuple[RunConfig, dict]:
    """Read a config document or a run manifest; returns the config and recorded input digests."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    inputs: dict = {}
    if "config" in data and set(data) <= {"config", "inputs", "version"}:
        inputs = data.get("inputs") or {}
        data = data["config"]
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: manifest 'config' must be an object")
    return config_from_mapping(data), inputs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaycap", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config or a manifest.json from an earlier run")
    p.add_argument("--relays", help="relay population CSV (relay_id,class,capacity_kbps)")
    p.add_argument("--method", help="one of: " + ", ".join(k.value for k in EstimatorKind))
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lambda_s", type=float, help="mean user paths per round")
    p.add_argument("--underloaded", action="store_true", default=None,
                   help="cap every client flow at a uniform draw from [cap-min, cap-max]")
    p.add_argument("--cap-min", dest="cap_min", type=float, help="kb/s")
    p.add_argument("--cap-max", dest="cap_max", type=float, help="kb/s")
    p.add_argument("--noise", action="store_true", default=None, help="multiplicative measurement noise")
    p.add_argument("--quant-base", dest="quant_base", type=float)
    p.add_argument("--case-tolerance", dest="case_tolerance", type=float)
    p.add_argument("--c-avg-client", dest="c_avg_client", type=float,
                   help="fixed average client rate in kb/s (default: measured each round)")
    p.add_argument("--trials", type=int, help="Monte Carlo replications")
    p.add_argument("--workers", type=int, help="processes for Monte Carlo trials")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


FLAG_KEYS = ("relays", "method", "rounds", "seed", "lambda_s", "underloaded", "cap_min", "cap_max", "noise",
             "quant_base", "case_tolerance", "c_avg_client", "trials", "workers")


def parse_config(argv: Sequence[str] | None = None) -> tuple[RunConfig, dict, argparse.Namespace]:
    """Resolve file values, then flag overrides. Raises ConfigError on bad input."""
    args = build_parser().parse_args(argv)
    cfg, inputs = load_config_file(args.config) if args.config else (RunConfig(), {})
    overrides = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k) is not None}
    if "relays" in overrides:
        inputs = {}
    cfg = config_from_mapping(overrides, cfg)
    validate(cfg)
    return cfg, inputs, args


def validate(cfg: RunConfig) -> None:
    if cfg.rounds < 1:
        raise ConfigError("rounds must be at least 1")
    if cfg.trials < 1:
        raise ConfigError("trials must be at least 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if cfg.lambda_s < 0:
        raise ConfigError("lambda_s must be non-negative")
    if not 0 < cfg.cap_min <= cfg.cap_max:
        raise ConfigError(f"need 0 < cap_min <= cap_max, got [{cfg.cap_min}, {cfg.cap_max}]")
    if not cfg.quant_base > 1:
        raise ConfigError("quant_base must exceed 1")
    if not 0 <= cfg.case_tolerance < 1:
        raise ConfigError("case_tolerance must lie in [0, 1)")
    if cfg.c_avg_client is not None and not cfg.c_avg_client > 0:
        raise ConfigError("c_avg_client must be positive")
    try:
        cfg.sim_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def population_rng(seed: int) -> np.random.Generator:
    # Key (1,) is disjoint from the per-trial keys (0, i) used by the simulator.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1,))))


def build_network(cfg: RunConfig, inputs: dict) -> tuple[Network, dict]:
    if cfg.relays:
        digest = sha256(cfg.relays)
        recorded = (inputs.get("relays") or {}).get("sha256")
        if recorded and recorded != digest:
            raise ConfigError(f"{cfg.relays}: content differs from the manifest (sha256 {digest[:12]}... "
                              f"vs {recorded[:12]}...)")
        return load_relays_csv(cfg.relays), {"relays": {"path": cfg.relays, "sha256": digest}}
    lo, hi = cfg.population_range
    return synthetic_network(cfg.population, population_rng(cfg.seed), (lo, hi)), {}


def manifest(cfg: RunConfig, inputs: dict) -> dict:
    return {"version": __version__, "config": asdict(cfg), "inputs": inputs}


def mc_summary(cfg: RunConfig, network: Network, result) -> dict:
    truth = network.capacities
    labels = network.class_labels()
    final_err = relative_error(result.mean[-1], truth)
    return {
        "method": cfg.method,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "rounds": cfg.rounds,
        "relays": [{"relay_id": j, "class": labels[j], "true_capacity_kbps": rounded(truth[j])}
                   for j in range(network.n)],
        "mean_estimate": [[rounded(v) for v in row] for row in result.mean],
        "sample_variance": [[rounded(v) for v in row] for row in result.variance],
        "final_mean_rel_error": {c.value: RoundStat.of(cfg.rounds - 1, final_err[network.mask(c)]).as_dict()
                                 for c in RelayClass},
    }


def prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    if not out.is_dir():
        raise OSError(f"output path {out} is not a directory")


def run(cfg: RunConfig, inputs: dict, out: str | Path) -> int:
    out = Path(out)
    try:
        network, digests = build_network(cfg, inputs)
        sim = cfg.sim_config()
        prepare_out(out)
        if cfg.trials > 1:
            result = run_monte_carlo(network, sim, cfg.trials, cfg.workers)
            atomic_write(out / "mc_summary.json", dumps(mc_summary(cfg, network, result)))
            log.info("final mean relative error: %s",
                     {c.value: fmt(relative_error(result.mean[-1], network.capacities)[network.mask(c)].mean())
                      for c in RelayClass if network.mask(c).any()})
        else:
            records = run_simulation(network, sim)
            export(records, network, out, cfg.method, cfg.seed)
            errs = compute_error_stats(records, network)
            log.info("final mean relative error: %s",
                     {k: fmt(v[-1].mean) for k, v in errs.per_class.items() if not v[-1].empty})
        atomic_write(out / "manifest.json", dumps(manifest(cfg, digests)))
    except ConfigError as exc:
        print(f"relaycap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, SimulationError) as exc:
        print(f"relaycap: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg, inputs, args = parse_config(argv)
    except ConfigError as exc:
        print(f"relaycap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(cfg, inputs, args.out)


if __name__ == "__main__":
    sys.exit(main())
