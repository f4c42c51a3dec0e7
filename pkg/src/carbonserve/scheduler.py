"""SLO-aware, carbon-minimizing configuration scheduler.

Profiling yields two workload x configuration matrices, carbon per token and
SLO attainment, usually with holes. :class:`MatrixCompleter` fills them by
low-rank alternating least squares; :func:`select_config` then picks, per
workload, the lowest-carbon configuration whose SLO attainment meets the
target, falling back to a priority rule when none does.

Cells that were simulated but could not run (out of memory) are *observed
infeasible*: their SLO attainment is a known 0 and their carbon is the
``+inf`` sentinel. They are excluded from carbon fitting and restored after
completion.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

Workload = tuple[str, float]  # (application_id, qps)


class CompletionError(ValueError):
    pass


class Priority(str, enum.Enum):
    SLO = "SLO"
    DEFAULT = "Default"


# ---------------------------------------------------------------------------
# matrices


@dataclass
class PerfMatrices:
    rows: list[Workload]
    cols: list[str]
    carbon: np.ndarray
    slo_att: np.ndarray
    observed: np.ndarray
    infeasible: np.ndarray = None

    def __post_init__(self):
        self.rows = [(str(a), float(q)) for a, q in self.rows]
        self.cols = [str(c) for c in self.cols]
        shape = (len(self.rows), len(self.cols))
        self.carbon = np.asarray(self.carbon, dtype=float)
        self.slo_att = np.asarray(self.slo_att, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.infeasible is None:
            self.infeasible = np.zeros(shape, dtype=bool)
        self.infeasible = np.asarray(self.infeasible, dtype=bool)
        for name in ("carbon", "slo_att", "observed", "infeasible"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(set(self.cols)) != len(self.cols):
            raise ValueError("duplicate configuration ids")
        if len(set(self.rows)) != len(self.rows):
            raise ValueError("duplicate workloads")
        if np.any(self.observed & self.infeasible):
            raise ValueError("a cell cannot be both observed and infeasible")
        obs = self.observed
        if not np.all(np.isfinite(self.carbon[obs])) or not np.all(np.isfinite(self.slo_att[obs])):
            raise ValueError("observed entries must be finite")
        if np.any(self.carbon[obs] < 0):
            raise ValueError("observed carbon must be >= 0")
        if np.any((self.slo_att[obs] < 0) | (self.slo_att[obs] > 1)):
            raise ValueError("observed slo_att must lie in [0, 1]")

    @property
    def known(self) -> np.ndarray:
        return self.observed | self.infeasible

    @property
    def is_complete(self) -> bool:
        """Every cell holds a value, measured or predicted."""
        return not (np.isnan(self.carbon).any() or np.isnan(self.slo_att).any())

    def row_index(self, workload: Workload) -> int:
        key = (str(workload[0]), float(workload[1]))
        try:
            return self.rows.index(key)
        except ValueError:
            raise KeyError(f"unknown workload {key!r}") from None

    def col_index(self, config_id: str) -> int:
        try:
            return self.cols.index(config_id)
        except ValueError:
            raise KeyError(f"unknown configuration {config_id!r}") from None

    @classmethod
    def from_records(cls, records: Sequence, cols: Sequence[str] | None = None) -> PerfMatrices:
        """Arrange profile records into matrices; absent cells are unobserved."""
        rows: list[Workload] = []
        col_ids = list(cols) if cols is not None else []
        for r in records:
            w = (r.application_id, float(r.qps))
            if w not in rows:
                rows.append(w)
            if cols is None and r.config_id not in col_ids:
                col_ids.append(r.config_id)
        shape = (len(rows), len(col_ids))
        carbon = np.full(shape, np.nan)
        slo = np.full(shape, np.nan)
        observed = np.zeros(shape, dtype=bool)
        infeasible = np.zeros(shape, dtype=bool)
        rindex = {w: i for i, w in enumerate(rows)}
        cindex = {c: j for j, c in enumerate(col_ids)}
        for r in records:
            if r.config_id not in cindex:
                continue
            i, j = rindex[(r.application_id, float(r.qps))], cindex[r.config_id]
            if observed[i, j] or infeasible[i, j]:
                raise ValueError(f"duplicate record for {r.config_id!r} at {rows[i]!r}")
            if math.isfinite(r.carbon_per_token):
                carbon[i, j], slo[i, j] = r.carbon_per_token, r.slo_attainment
                observed[i, j] = True
            else:
                carbon[i, j], slo[i, j] = math.inf, 0.0
                infeasible[i, j] = True
        return cls(rows, col_ids, carbon, slo, observed, infeasible)


# ---------------------------------------------------------------------------
# completion


def _ridge_rows(target: np.ndarray, mask: np.ndarray, other: np.ndarray, lam: float) -> np.ndarray:
    """Solve each row's ridge problem against the fixed factor ``other``."""
    rank = other.shape[1]
    out = np.zeros((target.shape[0], rank))
    eye = lam * np.eye(rank)
    for i in range(target.shape[0]):
        m = mask[i]
        if not m.any():
            continue
        f = other[m]
        out[i] = np.linalg.solve(f.T @ f + eye, f.T @ target[i, m])
    return out


def _balance(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same product ``U @ V.T``, with singular values split evenly between factors."""
    qu, ru = np.linalg.qr(U)
    qv, rv = np.linalg.qr(V)
    a, sv, bt = np.linalg.svd(ru @ rv.T)
    root = np.sqrt(sv)
    return qu @ (a * root), qv @ (bt.T * root)


class MatrixCompleter(TransformerMixin, BaseEstimator):
    """Low-rank completion of a matrix whose missing entries are NaN.

    Alternating least squares on data scaled by the RMS of the observed
    entries. The ridge weight starts at ``reg`` and is annealed geometrically
    down to ``reg * min_reg_ratio`` so that exactly low-rank data is recovered
    to high precision while early iterations stay well conditioned.
    ``transform`` keeps observed entries verbatim and clips the rest to
    ``[lower, upper]``.
    """

    def __init__(self, rank=2, reg=0.1, max_iter=200, tol=1e-8, random_state=0,
                 lower=None, upper=None, anneal_iter=40, min_reg_ratio=1e-9):
        self.rank = rank
        self.reg = reg
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.lower = lower
        self.upper = upper
        self.anneal_iter = anneal_iter
        self.min_reg_ratio = min_reg_ratio

    def _validate(self, X):
        X = check_array(X, dtype=float, ensure_all_finite="allow-nan", ensure_min_samples=1, ensure_min_features=1)
        mask = ~np.isnan(X)
        n, m = X.shape
        if not 1 <= self.rank <= min(n, m):
            raise ValueError(f"rank must be in [1, {min(n, m)}], got {self.rank}")
        return X, mask

    def fit(self, X, y=None):
        X, mask = self._validate(X)
        n, m = X.shape
        missing = ~mask
        for i in range(n):
            if missing[i].any() and not mask[i].any():
                raise CompletionError(f"row {i} has no observed entries")
        for j in range(m):
            if missing[:, j].any() and not mask[:, j].any():
                raise CompletionError(f"column {j} has no observed entries")
        scale = float(np.sqrt(np.mean(X[mask] ** 2))) if mask.any() else 1.0
        scale = scale if scale > 0 else 1.0
        Z = np.where(mask, X / scale, 0.0)
        # spectral start: truncated SVD of the zero-filled matrix, lightly jittered
        rng = np.random.default_rng(self.random_state)
        a, sv, bt = np.linalg.svd(Z / max(mask.mean(), 1e-12), full_matrices=False)
        root = np.sqrt(sv[: self.rank])
        U = a[:, : self.rank] * root + 1e-3 * rng.standard_normal((n, self.rank))
        V = bt[: self.rank].T * root + 1e-3 * rng.standard_normal((m, self.rank))
        prev = None
        self.n_iter_ = 0
        decay = self.min_reg_ratio ** (1.0 / max(1, self.anneal_iter))
        for it in range(self.max_iter):
            lam = self.reg * max(self.min_reg_ratio, decay**it)
            U = _ridge_rows(Z, mask, V, lam)
            V = _ridge_rows(Z.T, mask.T, U, lam)
            U, V = _balance(U, V)
            est = U @ V.T
            self.n_iter_ = it + 1
            if prev is not None and it >= self.anneal_iter:
                change = np.linalg.norm(est - prev) / max(np.linalg.norm(prev), 1e-300)
                if change < self.tol:
                    break
            prev = est
        self.row_factors_ = U
        self.col_factors_ = V
        self.scale_ = scale
        self.n_features_in_ = m
        return self

    def reconstruction(self) -> np.ndarray:
        check_is_fitted(self, "row_factors_")
        return self.row_factors_ @ self.col_factors_.T * self.scale_

    def transform(self, X):
        check_is_fitted(self, "row_factors_")
        X, mask = self._validate(X)
        est = self.reconstruction()
        if est.shape != X.shape:
            raise ValueError(f"fitted on shape {est.shape}, got {X.shape}")
        if self.lower is not None or self.upper is not None:
            est = np.clip(est, self.lower, self.upper)
        return np.where(mask, X, est)


def complete_matrices(
    m: PerfMatrices,
    rank: int = 2,
    iterations: int = 200,
    tolerance: float = 1e-8,
    reg: float = 0.1,
    seed: int = 0,
) -> PerfMatrices:
    """Fill every unknown cell of both matrices; the two are completed independently."""
    carbon, slo = m.carbon.copy(), m.slo_att.copy()
    missing = np.isnan(carbon) | np.isnan(slo)
    if missing.any():
        for name, values, fit_mask, lo, hi in (
            ("carbon", carbon, m.observed, 0.0, None),
            ("slo_att", slo, m.known, 0.0, 1.0),
        ):
            X = np.where(fit_mask, values, np.nan)
            if name == "carbon":
                # rows/columns infeasible wherever measured carry no carbon signal
                alive_rows = ~(m.infeasible.any(axis=1) & ~m.observed.any(axis=1))
                alive_cols = ~(m.infeasible.any(axis=0) & ~m.observed.any(axis=0))
            else:
                alive_rows, alive_cols = np.ones(len(m.rows), bool), np.ones(len(m.cols), bool)
            sub = X[np.ix_(alive_rows, alive_cols)]
            if sub.size == 0 or not np.isnan(sub).any():
                continue
            _check_coverage(m, sub, alive_rows, alive_cols, name)
            r = min(rank, *sub.shape)
            est = MatrixCompleter(rank=r, reg=reg, max_iter=iterations, tol=tolerance, random_state=seed,
                                  lower=lo, upper=hi).fit_transform(sub)
            block = values[np.ix_(alive_rows, alive_cols)]
            fill = missing[np.ix_(alive_rows, alive_cols)]
            block[fill] = est[fill]
            values[np.ix_(alive_rows, alive_cols)] = block
    carbon[np.isnan(carbon)] = math.inf  # unknown cells of those dead rows/columns
    carbon[m.infeasible] = math.inf
    slo[m.infeasible] = 0.0
    return PerfMatrices(m.rows, m.cols, carbon, slo, m.observed.copy(), m.infeasible.copy())


def _check_coverage(m: PerfMatrices, sub, alive_rows, alive_cols, name):
    rows = [w for w, keep in zip(m.rows, alive_rows) if keep]
    cols = [c for c, keep in zip(m.cols, alive_cols) if keep]
    known = ~np.isnan(sub)
    for i, w in enumerate(rows):
        if not known[i].any():
            raise CompletionError(f"{name}: workload {w!r} has no observed entries")
    for j, c in enumerate(cols):
        if not known[:, j].any():
            raise CompletionError(f"{name}: configuration {c!r} has no observed entries")


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SchedulingRequest:
    workload: Workload
    slo_target: float = 0.9
    priority: Priority = Priority.SLO

    def __post_init__(self):
        # 0 is allowed as the degenerate "everything is feasible" target
        if not 0.0 <= self.slo_target <= 1.0:
            raise ValueError(f"slo_target must be in [0, 1], got {self.slo_target}")
        object.__setattr__(self, "priority", Priority(self.priority))


@dataclass(frozen=True)
class SchedulingDecision:
    workload: Workload
    config_id: str
    predicted_carbon: float
    predicted_slo_att: float
    via_fallback: bool


def _require_complete(m: PerfMatrices):
    if not m.is_complete:
        raise ValueError("matrices must be completed before selection")


def select_config(m: PerfMatrices, req: SchedulingRequest, default_config: str = "standalone-a100") -> SchedulingDecision:
    _require_complete(m)
    i = m.row_index(req.workload)
    carbon, slo = m.carbon[i], m.slo_att[i]
    feasible = np.flatnonzero(slo >= req.slo_target)
    if feasible.size == 0:
        return fallback(m, req.workload, req.priority, default_config)
    # lowest carbon, then higher slo, then lower ordinal
    j = min(feasible, key=lambda j: (carbon[j], -slo[j], j))
    return SchedulingDecision(m.rows[i], m.cols[j], float(carbon[j]), float(slo[j]), False)


def fallback(m: PerfMatrices, workload: Workload, priority: Priority | str = Priority.SLO,
             default_config: str = "standalone-a100") -> SchedulingDecision:
    _require_complete(m)
    i = m.row_index(workload)
    carbon, slo = m.carbon[i], m.slo_att[i]
    if Priority(priority) is Priority.SLO:
        j = min(range(len(m.cols)), key=lambda j: (-slo[j], carbon[j], j))
    else:
        j = m.col_index(default_config)
    return SchedulingDecision(m.rows[i], m.cols[j], float(carbon[j]), float(slo[j]), True)


class SLOAwareScheduler(BaseEstimator):
    """Complete profiled matrices once, then answer per-workload queries."""

    def __init__(self, slo_target=0.9, priority="SLO", default_config="standalone-a100",
                 rank=2, reg=0.1, max_iter=200, tol=1e-8, random_state=0):
        self.slo_target = slo_target
        self.priority = priority
        self.default_config = default_config
        self.rank = rank
        self.reg = reg
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, matrices: PerfMatrices, y=None):
        if self.default_config not in matrices.cols:
            raise ValueError(f"default configuration {self.default_config!r} is not a column")
        Priority(self.priority)
        self.matrices_ = complete_matrices(matrices, self.rank, self.max_iter, self.tol, self.reg, self.random_state)
        return self

    def decide(self, workload: Workload) -> SchedulingDecision:
        check_is_fitted(self, "matrices_")
        req = SchedulingRequest(workload, self.slo_target, self.priority)
        return select_config(self.matrices_, req, self.default_config)

    def predict(self, workloads: Sequence[Workload] | None = None) -> list[SchedulingDecision]:
        check_is_fitted(self, "matrices_")
        rows = self.matrices_.rows if workloads is None else workloads
        return [self.decide(w) for w in rows]


# ---------------------------------------------------------------------------
# output

DECISION_COLUMNS = (
    "application_id", "qps", "config_id", "predicted_carbon_g", "predicted_slo_att", "via_fallback",
    "savings_vs_standalone",
)


def savings_vs(m: PerfMatrices, decision: SchedulingDecision, baseline: str) -> float:
    base = m.carbon[m.row_index(decision.workload), m.col_index(baseline)]
    if not (math.isfinite(base) and base > 0 and math.isfinite(decision.predicted_carbon)):
        return math.nan
    return float(1.0 - decision.predicted_carbon / base)


def write_decisions_csv(decisions: Sequence[SchedulingDecision], m: PerfMatrices, baseline: str,
                        fh: io.TextIOBase, metadata: str | None = None) -> None:
    if metadata:
        fh.write(f"# {metadata}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(DECISION_COLUMNS)
    for d in decisions:
        w.writerow([d.workload[0], repr(d.workload[1]), d.config_id, repr(d.predicted_carbon),
                    repr(d.predicted_slo_att), str(d.via_fallback).lower(), repr(savings_vs(m, d, baseline))])
