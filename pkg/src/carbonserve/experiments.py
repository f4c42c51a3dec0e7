"""Profiling cells, carbon composition and the evaluation sweeps.

A *cell* is one (configuration, application, QPS) simulation. Every
configuration at the same (application, QPS) sees the same trace, so
comparisons between configurations are not blurred by arrival noise.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .analysis import CaseParams, LifetimeParams
from .carbon import (
    CarbonBreakdown, GridProfile, LifetimeAssumption, embodied_carbon, lifetime_for, total_carbon, years_to_seconds,
)
from .hardware import CapacityError, ProfileRecord
from .scheduler import PerfMatrices, SLOAwareScheduler
from .sim import NetworkLink, ServingConfig, SimReport, simulate, slo_attainment
from .workload import ApplicationProfile, generate_trace


def derive_seed(master: int, *keys: int) -> int:
    """Stable 32-bit child seed for ``(master, *keys)``."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class CellSpec:
    index: int
    config: ServingConfig
    app: ApplicationProfile
    qps: float
    trace_seed: int
    sim_seed: int


@dataclass(frozen=True)
class Cell:
    spec: CellSpec
    report: SimReport | None
    slo_attainment: float
    error: str = ""

    @property
    def feasible(self) -> bool:
        return self.report is not None

    @property
    def config(self) -> ServingConfig:
        return self.spec.config


def plan_cells(configs: Sequence[ServingConfig], apps: Sequence[ApplicationProfile],
               qps_grid: Sequence[float], seed: int) -> list[CellSpec]:
    out = []
    for ai, app in enumerate(apps):
        for qi, qps in enumerate(qps_grid):
            trace_seed = derive_seed(seed, ai, qi)
            for cfg in configs:
                idx = len(out)
                out.append(CellSpec(idx, cfg, app, float(qps), trace_seed, derive_seed(seed, 1 << 20, idx)))
    return out


def run_cell(spec: CellSpec, link: NetworkLink, size: str, duration: float, arrival: str,
             sim: Callable | None = None, utilization: str = "roofline") -> Cell:
    sim = sim or simulate
    trace = generate_trace(spec.app, size, spec.qps, duration, spec.trace_seed, arrival)
    kwargs = {"utilization": utilization} if sim is simulate else {}
    try:
        report = sim(spec.config, trace, link, spec.sim_seed, **kwargs)
    except CapacityError as exc:
        return Cell(spec, None, 0.0, str(exc))
    slo = slo_attainment(report, spec.app) if report.per_request else 1.0
    return Cell(spec, report, slo)


def _run_packed(args):
    return run_cell(*args)


def profile_cells(
    configs: Sequence[ServingConfig],
    apps: Sequence[ApplicationProfile],
    qps_grid: Sequence[float],
    sim: Callable | None = None,
    grid: GridProfile | None = None,
    lifetimes=(),
    link: NetworkLink | None = None,
    seed: int = 0,
    size: str = "P50",
    duration: float = 120.0,
    arrival: str = "poisson",
    n_jobs: int = 1,
    utilization: str = "roofline",
    skip: Callable[[CellSpec], bool] | None = None,
) -> list[Cell]:
    """Simulate the cross product of configurations, applications and rates.

    Out-of-memory cells come back with ``report=None``. ``skip`` drops cells
    before simulation, which is how partially observed databases are built.
    ``grid`` and ``lifetimes`` are accepted for signature symmetry with
    :func:`records_from_cells` and are not used here.
    """
    link = link or NetworkLink()
    specs = plan_cells(configs, apps, qps_grid, seed)
    if skip is not None:
        specs = [s for s in specs if not skip(s)]
    args = [(s, link, size, duration, arrival, sim, utilization) for s in specs]
    if n_jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_packed, args, chunksize=1))
    return [_run_packed(a) for a in args]


# ---------------------------------------------------------------------------
# carbon


def gpu_times(report: SimReport, basis: str = "request") -> list[float]:
    if basis == "request":
        return [u.request_time for u in report.per_gpu]
    if basis == "busy":
        return [u.busy_time for u in report.per_gpu]
    raise ValueError(f"unknown embodied time basis {basis!r}")


def cell_carbon(cell: Cell, grid: GridProfile, lifetimes, basis: str = "request") -> CarbonBreakdown | None:
    if not cell.feasible:
        return None
    r = cell.report
    gpus = cell.config.gpus
    lts = [lifetime_for(g, lifetimes) for g in gpus]
    return total_carbon(gpu_times(r, basis), [u.energy for u in r.per_gpu], gpus, lts, grid,
                        r.tokens_out, extra_energy=r.link_energy)


def record_from_cell(cell: Cell, grid: GridProfile, lifetimes, basis: str = "request") -> ProfileRecord:
    spec = cell.spec
    cb = cell_carbon(cell, grid, lifetimes, basis)
    if cb is None or not cb.tokens:
        return ProfileRecord.infeasible(spec.config.id, spec.app.name, spec.qps)
    r = cell.report
    energy_j = (r.energy_kwh + r.link_energy) * 3.6e6
    return ProfileRecord(
        spec.config.id, spec.app.name, spec.qps, r.mean_ttft, r.mean_tpot, energy_j / cb.tokens,
        cb.per_token, cell.slo_attainment, cb.operational / cb.tokens, cb.embodied / cb.tokens,
    )


def records_from_cells(cells: Sequence[Cell], grid: GridProfile, lifetimes=(), basis: str = "request") -> list[ProfileRecord]:
    return [record_from_cell(c, grid, lifetimes, basis) for c in cells]


# ---------------------------------------------------------------------------
# per-run summaries

SUMMARY_COLUMNS = (
    "config_id", "qps", "carbon_per_token_g", "operational_g", "embodied_g", "energy_kwh",
    "slo_attainment", "peak_bandwidth_bps", "bytes_transferred",
)
REQUEST_COLUMNS = ("request_id", "ttft_s", "tpot_mean_s", "finish_s")


def summary_row(cell: Cell, grid: GridProfile, lifetimes, basis: str = "request") -> list:
    spec = cell.spec
    cb = cell_carbon(cell, grid, lifetimes, basis)
    if cb is None:
        inf = math.inf
        return [spec.config.id, spec.qps, inf, inf, inf, inf, 0.0, 0.0, 0]
    r = cell.report
    return [spec.config.id, spec.qps, cb.per_token, cb.operational, cb.embodied, r.energy_kwh + r.link_energy,
            cell.slo_attainment, r.peak_bandwidth_demand, r.bytes_transferred]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_rows(fh: io.TextIOBase, columns: Sequence[str], rows, metadata: str | None = None) -> None:
    if metadata:
        fh.write(f"# {metadata}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])


def request_rows(report: SimReport) -> list[list]:
    return [[m.request_id, m.ttft, m.tpot_mean, m.finish] for m in report.per_request]


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("qps", "carbon_intensity", "lifetime", "bandwidth")
SWEEP_COLUMNS = (
    "axis", "value", "application_id", "qps", "config_id", "via_fallback", "slo_attainment",
    "carbon_per_token_g", "standalone_carbon_per_token_g", "savings", "operational_savings", "embodied_savings",
)


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    application_id: str
    qps: float
    config_id: str
    via_fallback: bool
    slo_attainment: float
    carbon_per_token: float
    standalone_carbon_per_token: float
    savings: float
    operational_savings: float
    embodied_savings: float

    def row(self) -> list:
        return [self.axis, self.value, self.application_id, self.qps, self.config_id,
                str(self.via_fallback).lower(), self.slo_attainment, self.carbon_per_token,
                self.standalone_carbon_per_token, self.savings, self.operational_savings, self.embodied_savings]


@dataclass
class SchedulerOptions:
    slo_target: float = 0.9
    priority: str = "SLO"
    default_config: str = "standalone-a100"
    rank: int = 2
    reg: float = 0.1
    max_iter: int = 200
    tol: float = 1e-8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SchedulerOptions:
        return cls(
            slo_target=float(d.get("slo_target", 0.9)), priority=str(d.get("priority", "SLO")),
            default_config=str(d.get("default_config", "standalone-a100")), rank=int(d.get("rank", 2)),
            reg=float(d.get("reg", 0.1)), max_iter=int(d.get("max_iter", 200)), tol=float(d.get("tol", 1e-8)),
            seed=int(d.get("seed", 0)),
        )

    def estimator(self) -> SLOAwareScheduler:
        return SLOAwareScheduler(self.slo_target, self.priority, self.default_config, self.rank, self.reg,
                                 self.max_iter, self.tol, self.seed)


def schedule_cells(cells: Sequence[Cell], grid: GridProfile, lifetimes, opts: SchedulerOptions,
                   axis: str, value: float, basis: str = "request") -> list[SweepRow]:
    """Pick a configuration per workload and report its simulated savings."""
    records = records_from_cells(cells, grid, lifetimes, basis)
    matrices = PerfMatrices.from_records(records)
    sched = opts.estimator().fit(matrices)
    by_key = {(r.application_id, r.qps, r.config_id): r for r in records}
    out = []
    for decision in sched.predict():
        app, qps = decision.workload
        chosen = by_key[(app, qps, decision.config_id)]
        base = by_key.get((app, qps, opts.default_config))
        c, b = chosen.carbon_per_token, base.carbon_per_token if base else math.nan
        if math.isfinite(c) and math.isfinite(b) and b > 0:
            sav = 1.0 - c / b
            op = (base.operational_per_token - chosen.operational_per_token) / b
            emb = (base.embodied_per_token - chosen.embodied_per_token) / b
        else:
            sav = op = emb = math.nan
        out.append(SweepRow(axis, float(value), app, qps, decision.config_id, decision.via_fallback,
                            chosen.slo_attainment, c, b, sav, op, emb))
    return out


def _old_gpu_names(configs: Sequence[ServingConfig]) -> set[str]:
    return {c.old_gpu.name for c in configs if c.old_gpu is not None}


def lifetimes_with(lifetimes: dict, names: set[str], years: float) -> dict:
    out = dict(lifetimes)
    for n in names:
        out[n] = LifetimeAssumption(n, years_to_seconds(years))
    return out


def run_sweep(settings, axis: str, values: Sequence[float], apps: Sequence[ApplicationProfile] | None = None,
              qps_grid: Sequence[float] | None = None, lifetime_target: str = "old",
              n_jobs: int | None = None) -> list[SweepRow]:
    """Re-schedule (and where needed re-simulate) for each value of ``axis``.

    ``qps``: each value is a workload rate. ``carbon_intensity``: g/kWh,
    carbon recomputed from one set of simulations. ``lifetime``: years for
    the old GPUs (``lifetime_target="old"``) or the new GPUs (``"new"``).
    ``bandwidth``: link Gb/s, re-simulated per value.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one axis value")
    s = settings
    apps = list(apps) if apps is not None else [s.app(s.analysis.get("application", "ShareGPT"))]
    opts = SchedulerOptions.from_dict(s.scheduler)
    jobs = s.jobs if n_jobs is None else n_jobs
    base_qps = list(qps_grid) if qps_grid is not None else [float(s.analysis.get("qps", 1.0))]

    def cells_for(qps_list, link):
        return profile_cells(s.configs, apps, qps_list, link=link, seed=s.seed, size=s.size, duration=s.duration,
                             arrival=s.arrival, n_jobs=jobs, utilization=s.utilization)

    rows: list[SweepRow] = []
    if axis == "qps":
        cells = cells_for(list(values), s.link)
        picked = schedule_cells(cells, s.grid, s.lifetimes, opts, axis, 0.0, s.embodied_time)
        return [replace(r, value=r.qps) for r in picked]
    if axis == "bandwidth":
        for v in values:
            link = replace(s.link, bandwidth=float(v) * 1e9)
            rows += schedule_cells(cells_for(base_qps, link), s.grid, s.lifetimes, opts, axis, v, s.embodied_time)
        return rows
    cells = cells_for(base_qps, s.link)
    for v in values:
        if axis == "carbon_intensity":
            rows += schedule_cells(cells, GridProfile(f"ci-{v:g}", float(v)), s.lifetimes, opts, axis, v,
                                   s.embodied_time)
        else:
            names = _old_gpu_names(s.configs) if lifetime_target == "old" else {c.new_gpu.name for c in s.configs}
            lts = lifetimes_with(s.lifetimes, names, float(v))
            rows += schedule_cells(cells, s.grid, lts, opts, axis, v, s.embodied_time)
    return rows


# ---------------------------------------------------------------------------
# analysis parameters from simulations


def case_inputs(standalone: Cell, candidate: Cell, lifetimes, basis: str = "request"):
    """Times, energies and GPUs of the two cases, new GPU first."""
    if not (standalone.feasible and candidate.feasible):
        raise ValueError("both cells must be feasible")
    a_gpu = standalone.config.new_gpu
    if candidate.config.new_gpu.name != a_gpu.name:
        raise ValueError("candidate must use the standalone GPU as its new GPU")
    sa, ca = standalone.report, candidate.report
    t_s, t_c = gpu_times(sa, basis), gpu_times(ca, basis)
    b_gpu = candidate.config.old_gpu
    return {
        "t_a": t_s[0], "n_a": sa.per_gpu[0].energy,
        "t_a_prime": t_c[0], "n_a_prime": ca.per_gpu[0].energy,
        "t_b": t_c[1] if b_gpu is not None else 0.0,
        "n_b": (ca.per_gpu[1].energy if b_gpu is not None else 0.0) + ca.link_energy,
        "gpu_a": a_gpu, "gpu_b": b_gpu,
        "lt_a": lifetime_for(a_gpu, lifetimes),
        "lt_b": lifetime_for(b_gpu, lifetimes) if b_gpu is not None else None,
    }


def case_params(standalone: Cell, candidate: Cell, grid: GridProfile, lifetimes, basis: str = "request") -> CaseParams:
    d = case_inputs(standalone, candidate, lifetimes, basis)
    e_b = embodied_carbon(d["t_b"], d["gpu_b"], d["lt_b"]) if d["gpu_b"] is not None else 0.0
    return CaseParams(
        n_a=d["n_a"], n_a_prime=d["n_a_prime"], n_b=d["n_b"],
        e_a=embodied_carbon(d["t_a"], d["gpu_a"], d["lt_a"]),
        e_a_prime=embodied_carbon(d["t_a_prime"], d["gpu_a"], d["lt_a"]),
        e_b=e_b, alpha=grid.carbon_intensity,
    )


def lifetime_params(standalone: Cell, candidate: Cell, grid: GridProfile, lifetimes,
                    basis: str = "request") -> LifetimeParams:
    d = case_inputs(standalone, candidate, lifetimes, basis)
    if d["gpu_b"] is None:
        raise ValueError("lifetime analysis needs a configuration with an old GPU")
    return LifetimeParams(
        t_a_prime=d["t_a_prime"], t_a=d["t_a"], t_b=d["t_b"],
        big_t_a=d["lt_a"].lifetime, big_t_b=d["lt_b"].lifetime,
        cal_a=d["gpu_a"].embodied_grams, cal_b=d["gpu_b"].embodied_grams,
        n_a=d["n_a"], n_a_prime=d["n_a_prime"], n_b=d["n_b"], alpha=grid.carbon_intensity,
    )
