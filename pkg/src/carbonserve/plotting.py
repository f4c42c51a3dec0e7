"""SVG figures rendered from the CSV outputs (the CSV is always the source)."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "carbonserve"


def _read(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _save(fig, out: Path) -> Path:
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def _f(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def plot_sweep(csv_path: Path, out: Path) -> Path:
    """Savings per axis value, split into operational and embodied parts."""
    rows = _read(csv_path)
    axis = rows[0]["axis"] if rows else "value"
    series = defaultdict(list)
    for r in rows:
        series[r["qps"]].append(r)
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    for qps, rs in series.items():
        xs = [_f(r["value"]) for r in rs]
        left.plot(xs, [_f(r["carbon_per_token_g"]) for r in rs], marker="o", label=f"selected, qps {qps}")
        left.plot(xs, [_f(r["standalone_carbon_per_token_g"]) for r in rs], ls="--", label=f"baseline, qps {qps}")
    left.set_xlabel(axis)
    left.set_ylabel("gCO2 / token")
    left.legend(fontsize=7)
    labels = [f"{r['value']}|{r['qps']}" for r in rows]
    op = [_f(r["operational_savings"]) * 100 for r in rows]
    emb = [_f(r["embodied_savings"]) * 100 for r in rows]
    pos = range(len(rows))
    right.bar(pos, op, label="operational")
    right.bar(pos, emb, bottom=[o if o == o else 0 for o in op], label="embodied")
    right.set_xticks(list(pos), labels, rotation=45, fontsize=7)
    right.set_ylabel("savings, %")
    right.axhline(0, color="black", lw=0.5)
    right.legend(fontsize=7)
    return _save(fig, out)


def plot_ci(csv_path: Path, out: Path) -> Path:
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([_f(r["alpha"]) for r in rows], [_f(r["savings_exact"]) * 100 for r in rows], marker="o")
    ax.set_xlabel("carbon intensity, gCO2/kWh")
    ax.set_ylabel("savings, %")
    return _save(fig, out)


def plot_lifetime(csv_path: Path, out: Path) -> Path:
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    by_a = defaultdict(list)
    for r in rows:
        by_a[r["big_t_a_years"]].append(r)
    for ta, rs in by_a.items():
        ax.plot([_f(r["big_t_b_years"]) for r in rs], [_f(r["savings_exact"]) * 100 for r in rs],
                marker=".", label=f"new GPU {_f(ta):g} y")
    ax.set_xlabel("old GPU lifetime, years")
    ax.set_ylabel("savings, %")
    ax.legend(fontsize=7)
    return _save(fig, out)


def plot_profile(csv_path: Path, out: Path) -> Path:
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_cfg = defaultdict(list)
    for r in rows:
        by_cfg[(r["config_id"], r["application_id"])].append(r)
    for (cfg, app), rs in by_cfg.items():
        pts = [(_f(r["qps"]), _f(r["carbon_per_token_g"])) for r in rs]
        pts = [p for p in pts if math.isfinite(p[1])]
        if pts:
            ax.plot(*zip(*pts), marker=".", label=f"{cfg} / {app}")
    ax.set_xlabel("QPS")
    ax.set_ylabel("gCO2 / token")
    if ax.lines:
        ax.set_yscale("log")
        ax.legend(fontsize=6)
    return _save(fig, out)
