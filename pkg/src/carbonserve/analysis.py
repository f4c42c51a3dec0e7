"""Closed-form carbon savings of a two-GPU deployment against a standalone one.

Notation: ``n_*`` are energies (kWh), ``e_*`` embodied carbon (g), ``alpha``
the grid carbon intensity (g/kWh). Subscript ``a`` is the new GPU running
alone, ``a_prime`` the new GPU inside the split deployment, ``b`` the old GPU.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

from .carbon import seconds_to_years


def _check_non_negative(obj, names):
    for name in names:
        value = getattr(obj, name)
        if not value >= 0:
            raise ValueError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class CaseParams:
    n_a: float
    n_a_prime: float
    n_b: float
    e_a: float
    e_a_prime: float
    e_b: float
    alpha: float

    def __post_init__(self):
        _check_non_negative(self, ("n_a", "n_a_prime", "n_b", "e_a", "e_a_prime", "e_b", "alpha"))

    def with_alpha(self, alpha: float) -> CaseParams:
        return replace(self, alpha=alpha)


@dataclass(frozen=True)
class LifetimeParams:
    """Execution times and GPU lifetimes from which the embodied terms follow."""

    t_a_prime: float
    t_a: float
    t_b: float
    big_t_a: float
    big_t_b: float
    cal_a: float  # total embodied carbon of the new GPU, g
    cal_b: float
    n_a: float
    n_a_prime: float
    n_b: float
    alpha: float

    def __post_init__(self):
        _check_non_negative(self, ("t_a_prime", "t_a", "t_b", "cal_a", "cal_b", "n_a", "n_a_prime", "n_b", "alpha"))
        if not (self.big_t_a > 0 and self.big_t_b > 0):
            raise ValueError("lifetimes must be positive")

    def case(self, big_t_a: float | None = None, big_t_b: float | None = None) -> CaseParams:
        ta = self.big_t_a if big_t_a is None else big_t_a
        tb = self.big_t_b if big_t_b is None else big_t_b
        if not (ta > 0 and tb > 0):
            raise ValueError("lifetimes must be positive")
        return CaseParams(
            n_a=self.n_a, n_a_prime=self.n_a_prime, n_b=self.n_b,
            e_a=self.t_a / ta * self.cal_a,
            e_a_prime=self.t_a_prime / ta * self.cal_a,
            e_b=self.t_b / tb * self.cal_b,
            alpha=self.alpha,
        )


def savings_condition(p: CaseParams) -> bool:
    """True when the split deployment uses strictly less energy."""
    return p.n_a > p.n_a_prime + p.n_b


def savings_ratio(p: CaseParams) -> tuple[float, float]:
    """Return ``(ratio, savings)`` where ratio = split carbon / standalone carbon."""
    den = p.n_a * p.alpha + p.e_a
    if not den > 0:
        raise ZeroDivisionError("standalone carbon is zero; the savings ratio is undefined")
    ratio = ((p.n_a_prime + p.n_b) * p.alpha + p.e_a_prime + p.e_b) / den
    return ratio, 1.0 - ratio


def ci_sensitivity(p: CaseParams, alphas: Sequence[float]) -> list[float]:
    alphas = list(alphas)
    if any(a < 0 for a in alphas):
        raise ValueError("carbon intensities must be >= 0")
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("carbon intensities must be sorted ascending")
    return [savings_ratio(p.with_alpha(a))[1] for a in alphas]


@dataclass(frozen=True)
class LifetimePoint:
    big_t_a: float
    big_t_b: float
    savings_exact: float
    approx_term: float


def approx_lifetime_term(p: LifetimeParams, big_t_a: float, big_t_b: float) -> float:
    """Variable part of the lifetime approximation.

    The denominator charges the new GPU over ``t_a_prime`` as in the published
    approximation, although the standalone case runs for ``t_a``; the value is
    reported as-is next to the exact savings.
    """
    num = p.t_b / big_t_b * p.cal_b
    if num == 0.0:
        return 0.0
    return num / (p.n_a * p.alpha + p.t_a_prime / big_t_a * p.cal_a)


def lifetime_sensitivity(
    p: LifetimeParams, big_t_a_grid: Sequence[float], big_t_b_grid: Sequence[float]
) -> list[LifetimePoint]:
    """Exact savings over a (new lifetime, old lifetime) grid, row-major in ``big_t_a``."""
    if any(not t > 0 for t in (*big_t_a_grid, *big_t_b_grid)):
        raise ValueError("lifetime grids must be positive")
    out = []
    for ta in big_t_a_grid:
        for tb in big_t_b_grid:
            exact = savings_ratio(p.case(ta, tb))[1]
            out.append(LifetimePoint(float(ta), float(tb), exact, approx_lifetime_term(p, ta, tb)))
    return out


CI_COLUMNS = ("alpha", "savings_exact")
LIFETIME_COLUMNS = ("big_t_a_years", "big_t_b_years", "savings_exact", "savings_approx_term")


def write_ci_csv(alphas: Sequence[float], savings: Sequence[float], fh: io.TextIOBase, metadata: str | None = None):
    if metadata:
        fh.write(f"# {metadata}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CI_COLUMNS)
    for a, s in zip(alphas, savings):
        w.writerow([repr(float(a)), repr(float(s))])


def write_lifetime_csv(points: Sequence[LifetimePoint], fh: io.TextIOBase, metadata: str | None = None):
    if metadata:
        fh.write(f"# {metadata}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LIFETIME_COLUMNS)
    for pt in points:
        w.writerow([repr(seconds_to_years(pt.big_t_a)), repr(seconds_to_years(pt.big_t_b)),
                    repr(pt.savings_exact), repr(pt.approx_term)])
