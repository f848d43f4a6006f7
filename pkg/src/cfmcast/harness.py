"""Monte Carlo experiment driver, power sweeps and CSV persistence."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .centralized import alternating_optimize, rx_combiners_ls
from .distributed import VARIANTS, run_bidirectional
from .metrics import RunTrace
from .scenario import (ConfigurationError, ScenarioConfig, assign_groups, build_geometry,
                       draw_channels, random_feasible_precoders, random_unit_combiners)
from .training import dl_effective, make_pilot_book, phase_rng, ul_antenna_specific

log = logging.getLogger(__name__)

WORKERS_ENV = "CFMCAST_WORKERS"

# method tag -> pilot phases it needs
METHODS = {
    "centralized": (),
    "centralized_group": (),
    "centralized_estimated": ("ul", "dl"),
    "best_response": ("ul1+ul3", "dl"),
    "group_specific": ("ul2+ul3", "dl"),
    "local_mmse": ("ul1", "dl"),
}

FIXED_COLUMNS = ("method", "rho_bs_dbm", "drop", "iteration", "sum_group_rate",
                 "effective_rate", "sum_mse", "sum_group_mse")


@dataclass(frozen=True)
class ResultRow:
    """One (method, power, drop, iteration) record as stored in the CSV."""

    method: str
    rho_bs_dbm: float
    drop: int
    iteration: int
    sum_group_rate: float
    effective_rate: float
    sum_mse: float
    sum_group_mse: float
    min_sinr_db: tuple[float, ...]


@dataclass
class ResultTable:
    """Per-drop rows plus the drops that failed.

    ``failures`` holds ``(method, rho_bs_dbm, drop, message)`` for every run
    aborted by an error; ``partial`` is true when any exist.
    """

    rows: list[ResultRow] = field(default_factory=list)
    failures: list[tuple[str, float, int, str]] = field(default_factory=list)
    traces: list[RunTrace] = field(default_factory=list, compare=False, repr=False)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def num_groups(self) -> int:
        return len(self.rows[0].min_sinr_db) if self.rows else 0

    def extend(self, other: "ResultTable") -> None:
        self.rows.extend(other.rows)
        self.failures.extend(other.failures)
        self.traces.extend(other.traces)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def select(self, method=None, rho_bs_dbm=None, iteration=None) -> list[ResultRow]:
        return [r for r in self.rows
                if (method is None or r.method == method)
                and (rho_bs_dbm is None or r.rho_bs_dbm == rho_bs_dbm)
                and (iteration is None or r.iteration == iteration)]

    def summary(self) -> list[dict]:
        """Across-drop statistics per (method, rho_bs_dbm, iteration).

        Each entry has ``mean_rate``, ``mean_effective_rate``, ``std_rate``
        (population) and ``drops``; order follows first appearance.
        """
        buckets: dict[tuple, list[ResultRow]] = {}
        for r in self.rows:
            buckets.setdefault((r.method, r.rho_bs_dbm, r.iteration), []).append(r)
        out = []
        for (method, rho, it), rows in buckets.items():
            rates = np.array([r.sum_group_rate for r in rows])
            out.append({"method": method, "rho_bs_dbm": rho, "iteration": it,
                        "mean_rate": float(rates.mean()),
                        "mean_effective_rate": float(np.mean([r.effective_rate for r in rows])),
                        "std_rate": float(rates.std()), "drops": len(rows)})
        return out

    def final_mean_rate(self, method: str, rho_bs_dbm=None) -> float:
        rows = self.select(method, rho_bs_dbm)
        if not rows:
            raise KeyError(f"no rows for method {method!r}")
        last = max(r.iteration for r in rows)
        return float(np.mean([r.sum_group_rate for r in rows if r.iteration == last]))


def _rows_from_trace(trace: RunTrace, rho_bs_dbm: float) -> list[ResultRow]:
    rows = []
    for rec in trace.records:
        with np.errstate(divide="ignore"):
            sinr_db = 10.0 * np.log10(np.asarray(rec.group_min_sinr, dtype=float))
        rows.append(ResultRow(trace.method, float(rho_bs_dbm), trace.drop, rec.iteration,
                              float(rec.sum_group_rate), float(rec.effective_rate),
                              float(rec.sum_mse), float(rec.sum_group_mse),
                              tuple(float(x) for x in sinr_db)))
    return rows


def check_methods(config: ScenarioConfig, methods) -> list[str]:
    """Validate method tags and their pilot budgets before any drop runs."""
    methods = list(methods)
    if not methods:
        raise ConfigurationError("at least one method is required")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigurationError(
            f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigurationError("duplicate methods requested")
    phases = [p for m in methods for p in METHODS[m]]
    make_pilot_book(config.tau, config.num_ue, config.num_groups, config.num_ue_antennas,
                    required=phases)
    return methods


def _run_method(method, config, h, grouping, v0, w0, drop) -> RunTrace:
    common = dict(rho_bs=config.rho_bs_w, noise_ue=config.noise_ue_w,
                  num_iterations=config.num_iterations, init_combiners=v0, mu=config.mu)
    pilots = make_pilot_book(config.tau, config.num_ue, config.num_groups,
                             config.num_ue_antennas, required=METHODS[method])

    def rng_for(i, phase):
        return phase_rng(config.seed, drop, i, phase)

    if method == "centralized":
        _, trace = alternating_optimize(h, grouping, "sum_mse", method=method, **common)
    elif method == "centralized_group":
        _, trace = alternating_optimize(h, grouping, "sum_group_mse", method=method,
                                        subgradient_steps=config.subgradient_steps,
                                        step0=config.subgradient_step0, **common)
    elif method == "centralized_estimated":
        _, h_hat = ul_antenna_specific(h, pilots, config.rho_ue_w, config.noise_bs_w,
                                       rng_for(0, "ul"))
        own = pilots.group_pilots[grouping.group_of]
        count = iter(range(1, config.num_iterations + 1))

        def evaluate(w, _v):
            snap, _ = dl_effective(h, w, grouping, pilots, config.rho_bs_w,
                                   config.noise_ue_w, rng_for(next(count), "dl"))
            return rx_combiners_ls(snap.received, own)

        _, scratch = alternating_optimize(h_hat, grouping, "sum_mse", method=method,
                                          h_true=h, evaluate=evaluate, **common)
        # one antenna-level UL estimate plus one DL round, charged once
        fixed = config.num_ue * config.num_ue_antennas + config.num_groups
        trace = RunTrace(method=method, objective_history=scratch.objective_history)
        for rec in scratch.records:
            trace.records.append(type(rec)(
                rec.iteration, rec.sum_mse, rec.sum_group_mse, rec.group_min_sinr,
                rec.sum_group_rate,
                max(0.0, 1.0 - fixed / config.r_tot) * rec.sum_group_rate, rec.regularized))
    elif method in VARIANTS:
        _, trace = run_bidirectional(
            h, grouping, method, pilots=pilots, rho_bs=config.rho_bs_w, rho_ue=config.rho_ue_w,
            noise_bs=config.noise_bs_w, noise_ue=config.noise_ue_w,
            num_iterations=config.num_iterations, init_combiners=v0, init_precoders=w0,
            alpha=config.alpha, mu=config.mu, rng_for=rng_for, r_tot=config.r_tot)
    else:  # pragma: no cover - guarded by check_methods
        raise ConfigurationError(f"unknown method {method!r}")
    return trace


def run_drop(config: ScenarioConfig, methods, drop: int) -> ResultTable:
    """Run every method on one drop; all share channels and initial beamformers."""
    rng = np.random.default_rng([int(config.seed), int(drop)])
    geometry = build_geometry(config, rng)
    grouping = assign_groups(config, rng, geometry)
    channels = draw_channels(geometry, config, rng)
    v0 = random_unit_combiners(config.num_ue, config.num_ue_antennas, rng)
    w0 = random_feasible_precoders(config.num_bs, config.num_groups, config.num_bs_antennas,
                                   config.rho_bs_w, rng)
    fingerprint, digest = config.fingerprint(), channels.digest()
    table = ResultTable()
    for method in methods:
        try:
            trace = _run_method(method, config, channels.h, grouping, v0, w0, drop)
        except Exception as exc:  # abort this drop for this method only
            log.warning("drop %d, method %s failed: %s: %s", drop, method,
                        type(exc).__name__, exc)
            table.failures.append((method, config.rho_bs_dbm, drop, f"{type(exc).__name__}: {exc}"))
            continue
        trace.drop, trace.seed = drop, config.seed
        trace.fingerprint, trace.channel_digest = fingerprint, digest
        table.traces.append(trace)
        table.rows.extend(_rows_from_trace(trace, config.rho_bs_dbm))
    return table


def _run_drop_args(args):
    return run_drop(*args)


def worker_count(default: int = 1) -> int:
    """Worker processes, overridable through ``CFMCAST_WORKERS``."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError(f"{WORKERS_ENV} must be >= 1, got {value}")
    return value


def run_experiment(config: ScenarioConfig, methods, workers: int | None = None) -> ResultTable:
    """Run ``methods`` on ``config.num_drops`` paired drops.

    Drops may run in a process pool (``workers`` or ``CFMCAST_WORKERS``); the
    output is folded in drop order, so it does not depend on scheduling.
    """
    config.validate()
    methods = check_methods(config, methods)
    workers = worker_count() if workers is None else int(workers)
    jobs = [(config, methods, d) for d in range(config.num_drops)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            parts = list(pool.map(_run_drop_args, jobs))
    else:
        parts = [_run_drop_args(j) for j in jobs]
    table = ResultTable()
    for part in parts:
        table.extend(part)
    return table


def sweep_power(config: ScenarioConfig, rho_bs_dbm, methods, workers: int | None = None) -> ResultTable:
    """``run_experiment`` at each BS power with the same seeds and drops."""
    levels = [float(x) for x in rho_bs_dbm]
    if not levels:
        raise ConfigurationError("sweep_power needs at least one rho_bs value")
    table = ResultTable()
    for rho in levels:
        table.extend(run_experiment(config.replace(rho_bs_dbm=rho), methods, workers))
    return table


def _header(num_groups: int) -> list[str]:
    return list(FIXED_COLUMNS) + [f"min_sinr_db_g{g}" for g in range(num_groups)]


def write_results(table: ResultTable, path) -> None:
    """Write one CSV row per (method, power, drop, iteration).

    Floats use ``repr`` so reading back reproduces them exactly.
    """
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_header(table.num_groups))
        for r in table.rows:
            writer.writerow([r.method, repr(r.rho_bs_dbm), r.drop, r.iteration,
                             repr(r.sum_group_rate), repr(r.effective_rate), repr(r.sum_mse),
                             repr(r.sum_group_mse), *(repr(x) for x in r.min_sinr_db)])


def read_results(path) -> ResultTable:
    """Inverse of :func:`write_results` (failures are not stored)."""
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}")
        table = ResultTable()
        for line in reader:
            vals = [float(x) for x in line[4:]]
            table.rows.append(ResultRow(line[0], float(line[1]), int(line[2]), int(line[3]),
                                        *vals[:4], tuple(vals[4:])))
    return table


def final_rates(table: ResultTable, methods=None, rho_bs_dbm=None) -> dict[str, float]:
    """Mean sum-group rate at the last iteration, per method."""
    methods = table.methods() if methods is None else methods
    return {m: table.final_mean_rate(m, rho_bs_dbm) for m in methods}


def rate_gap(table: ResultTable, rho_bs_dbm: float, better: str = "centralized_group",
             other: str = "centralized") -> float:
    """Final-iteration mean rate of ``better`` minus that of ``other``."""
    value = table.final_mean_rate(better, rho_bs_dbm) - table.final_mean_rate(other, rho_bs_dbm)
    if not math.isfinite(value):
        raise ValueError("non-finite rate gap")
    return value
