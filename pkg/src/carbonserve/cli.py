"""Command-line entry point: ``carbonserve <command>``.

Exit codes: 0 success, 2 invalid input or configuration, 3 nothing feasible.
"""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ci_sensitivity, lifetime_sensitivity, write_ci_csv, write_lifetime_csv
from .carbon import years_to_seconds
from .config import ConfigError, Settings, load_settings
from .experiments import (
    REQUEST_COLUMNS, SUMMARY_COLUMNS, SWEEP_AXES, SWEEP_COLUMNS, SchedulerOptions, case_params, derive_seed,
    lifetime_params, plan_cells, profile_cells, records_from_cells, request_rows, run_cell, run_sweep, summary_row,
    write_rows,
)
from .hardware import read_profile_csv, write_profile_csv
from .scheduler import CompletionError, PerfMatrices, write_decisions_csv

log = logging.getLogger("carbonserve")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
OUTPUT_ENV = "CARBONSERVE_OUTPUT_DIR"


def metadata(settings: Settings) -> str:
    return f"tool=carbonserve version={__version__} seed={settings.seed} config_hash={settings.hash}"


def write_atomic(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def _render(writer, *args, **kwargs) -> str:
    buf = io.StringIO()
    writer(*args, buf, **kwargs)
    return buf.getvalue()


def _render_rows(columns, rows, metadata: str) -> str:
    buf = io.StringIO()
    write_rows(buf, columns, rows, metadata=metadata)
    return buf.getvalue()


def _plot(fn, csv_path: Path) -> None:
    try:
        from . import plotting

        getattr(plotting, fn)(csv_path, csv_path.with_suffix(".svg"))
    except Exception as exc:  # figures are a convenience; the CSV already landed
        log.warning("plot for %s skipped: %s", csv_path.name, exc)


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("--values/--qps", f"expected comma-separated numbers, got {text!r}") from None


def _apps(settings: Settings, text: str | None):
    if text is None:
        return list(settings.apps.values())
    return [settings.app(name.strip()) for name in text.split(",") if name.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args, s: Settings, out: Path) -> int:
    apps = _apps(s, args.apps)
    qps = _floats(args.qps) or s.qps_grid
    if not 0.0 < args.observe_fraction <= 1.0:
        raise ConfigError("--observe-fraction", "must be in (0, 1]")
    skip = None
    if args.observe_fraction < 1.0:
        keep = np.random.default_rng(derive_seed(s.seed, 7)).random(len(plan_cells(s.configs, apps, qps, s.seed)))
        skip = lambda spec: keep[spec.index] >= args.observe_fraction  # noqa: E731
    cells = profile_cells(s.configs, apps, qps, link=s.link, seed=s.seed, size=s.size, duration=s.duration,
                          arrival=s.arrival, n_jobs=args.jobs or s.jobs, utilization=s.utilization, skip=skip)
    records = records_from_cells(cells, s.grid, s.lifetimes, s.embodied_time)
    path = write_atomic(out / "profile.csv", _render(write_profile_csv, records, metadata=metadata(s)))
    _plot("plot_profile", path)
    print(path)
    return EXIT_OK if any(r.feasible for r in records) else EXIT_INFEASIBLE


def cmd_schedule(args, s: Settings, out: Path) -> int:
    db = Path(args.database) if args.database else out / "profile.csv"
    if not db.exists():
        raise ConfigError("--database", f"profile database {db} not found; run `carbonserve profile` first")
    with open(db, newline="") as fh:
        records = read_profile_csv(fh)
    opts = SchedulerOptions.from_dict(s.scheduler)
    if args.slo_target is not None:
        opts.slo_target = args.slo_target
    if args.priority is not None:
        opts.priority = args.priority
    cols = [c.id for c in s.configs if any(r.config_id == c.id for r in records)]
    matrices = PerfMatrices.from_records(records, cols)
    sched = opts.estimator().fit(matrices)
    decisions = sched.predict()
    text = _render(write_decisions_csv, decisions, sched.matrices_, opts.default_config, metadata=metadata(s))
    print(write_atomic(out / "decisions.csv", text))
    return EXIT_INFEASIBLE if all(d.via_fallback for d in decisions) else EXIT_OK


def cmd_simulate(args, s: Settings, out: Path) -> int:
    config = s.config(args.config_id)
    app = s.app(args.app or s.analysis.get("application", "ShareGPT"))
    qps = args.qps if args.qps is not None else float(s.analysis.get("qps", 1.0))
    spec = plan_cells([config], [app], [qps], s.seed)[0]
    cell = run_cell(spec, s.link, s.size, s.duration, s.arrival, utilization=s.utilization)
    meta = metadata(s)
    stem = f"{config.id}_{app.name}_qps{qps:g}"
    if cell.feasible:
        print(write_atomic(out / f"requests_{stem}.csv",
                           _render_rows(REQUEST_COLUMNS, request_rows(cell.report), meta)))
    else:
        print(f"{config.id}: infeasible ({cell.error})", file=sys.stderr)
    row = summary_row(cell, s.grid, s.lifetimes, s.embodied_time)
    print(write_atomic(out / f"summary_{stem}.csv", _render_rows(SUMMARY_COLUMNS, [row], meta)))
    return EXIT_OK if cell.feasible else EXIT_INFEASIBLE


_DEFAULT_VALUES = {
    "carbon_intensity": lambda s: [g.carbon_intensity for g in sorted(s.grids.values(), key=lambda g: g.carbon_intensity)],
    "lifetime": lambda s: [float(y) for y in s.analysis.get("old_lifetimes_years", [5, 6, 7, 8, 9, 10])],
    "bandwidth": lambda s: [1.0, 4.0, 16.0],
    "qps": lambda s: list(s.qps_grid),
}


def cmd_sweep(args, s: Settings, out: Path) -> int:
    values = _floats(args.values) or _DEFAULT_VALUES[args.axis](s)
    if args.axis == "lifetime" and args.values is None and args.target == "new":
        values = [float(y) for y in s.analysis.get("new_lifetimes_years", [2, 3, 4, 5, 6, 7])]
    app = [s.app(args.app)] if args.app else None
    rows = run_sweep(s, args.axis, values, apps=app, qps_grid=_floats(args.qps), lifetime_target=args.target,
                     n_jobs=args.jobs)
    name = f"sweep_{args.axis}" + (f"_{args.target}" if args.axis == "lifetime" else "")
    path = write_atomic(out / f"{name}.csv", _render_rows(SWEEP_COLUMNS, [r.row() for r in rows], metadata(s)))
    _plot("plot_sweep", path)
    print(path)
    return EXIT_INFEASIBLE if all(r.via_fallback for r in rows) else EXIT_OK


def _analysis_cells(s: Settings, app, qps: float, config_id: str):
    baseline = s.scheduler.get("default_config", "standalone-a100")
    cells = profile_cells(s.configs, [app], [qps], link=s.link, seed=s.seed, size=s.size, duration=s.duration,
                          arrival=s.arrival, n_jobs=s.jobs, utilization=s.utilization)
    by_id = {c.config.id: c for c in cells}
    if baseline not in by_id or not by_id[baseline].feasible:
        raise ConfigError("scheduler.default_config", f"baseline {baseline!r} is not feasible at {app.name} qps {qps:g}")
    if config_id == "auto":
        target = float(s.scheduler.get("slo_target", 0.9))
        records = {r.config_id: r for r in records_from_cells(cells, s.grid, s.lifetimes, s.embodied_time)}
        pool = [c for c in cells if c.feasible and c.config.old_gpu is not None and c.slo_attainment >= target]
        if not pool:
            return by_id[baseline], None
        candidate = min(pool, key=lambda c: records[c.config.id].carbon_per_token)
    else:
        candidate = by_id.get(config_id)
        if candidate is None:
            raise ConfigError("--config-id", f"no configuration with id {config_id!r}")
    return by_id[baseline], candidate


def cmd_analyze(args, s: Settings, out: Path) -> int:
    a = s.analysis
    app = s.app(args.app or a.get("application", "ShareGPT"))
    qps = args.qps if args.qps is not None else float(a.get("qps", 1.0))
    base, cand = _analysis_cells(s, app, qps, args.config_id or a.get("config", "auto"))
    if cand is None or not cand.feasible:
        print("no feasible disaggregated configuration to analyze", file=sys.stderr)
        return EXIT_INFEASIBLE
    meta = f"{metadata(s)} config={cand.config.id}"
    alphas = [float(x) for x in a.get("alphas", [17, 261, 501])]
    p = case_params(base, cand, s.grid, s.lifetimes, s.embodied_time)
    ci_path = write_atomic(out / "analysis_ci.csv", _render(write_ci_csv, alphas, ci_sensitivity(p, alphas),
                                                            metadata=meta))
    _plot("plot_ci", ci_path)
    print(ci_path)
    if cand.config.old_gpu is not None:
        lp = lifetime_params(base, cand, s.grid, s.lifetimes, s.embodied_time)
        ta = [years_to_seconds(y) for y in a.get("new_lifetimes_years", [2, 3, 4, 5, 6, 7])]
        tb = [years_to_seconds(y) for y in a.get("old_lifetimes_years", [5, 6, 7, 8, 9, 10])]
        lt_path = write_atomic(out / "analysis_lifetime.csv",
                               _render(write_lifetime_csv, lifetime_sensitivity(lp, ta, tb), metadata=meta))
        _plot("plot_lifetime", lt_path)
        print(lt_path)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carbonserve", description="Carbon-aware LLM serving simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON config file (defaults to the bundled calibration)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. cli.seed=3 (repeatable)")
    parser.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else cli.output_dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="simulate every configuration x application x QPS cell")
    p.add_argument("--apps", help="comma-separated application names (default: all)")
    p.add_argument("--qps", help="comma-separated rates (default: cli.qps_grid)")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--observe-fraction", type=float, default=1.0,
                   help="simulate only this seeded fraction of cells, leaving the rest for completion")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("schedule", help="complete the profile matrices and pick a configuration per workload")
    p.add_argument("--database", help="profile CSV (default: <out>/profile.csv)")
    p.add_argument("--slo-target", type=float)
    p.add_argument("--priority", choices=["SLO", "Default"])
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="run one configuration on one trace")
    p.add_argument("--config-id", required=True)
    p.add_argument("--app")
    p.add_argument("--qps", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="re-schedule across one experiment axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", help="comma-separated axis values (gCO2/kWh, years, Gb/s or QPS)")
    p.add_argument("--qps", help="workload rates for the non-QPS axes (default: analysis.qps)")
    p.add_argument("--app")
    p.add_argument("--target", choices=["old", "new"], default="old", help="which GPUs the lifetime axis changes")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="closed-form carbon-intensity and lifetime sensitivity")
    p.add_argument("--config-id", help="configuration to compare with the baseline, or 'auto'")
    p.add_argument("--app")
    p.add_argument("--qps", type=float)
    p.set_defaults(func=cmd_analyze)
    return parser


def output_dir(args, s: Settings) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or s.output_dir)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = load_settings(args.config, args.overrides)
        return args.func(args, settings, output_dir(args, settings))
    except (ConfigError, CompletionError, KeyError, ValueError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"carbonserve: error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
