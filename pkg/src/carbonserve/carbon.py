"""Carbon accounting: embodied, operational and total emissions.

All carbon is carried in grams CO2, energy in kWh and time in seconds.
Unit conversions live here and nowhere else.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

SECONDS_PER_YEAR = 365 * 24 * 3600
JOULES_PER_KWH = 3.6e6
GRAMS_PER_KG = 1000.0
BYTES_PER_GIB = 2**30

DEFAULT_LIFETIME_YEARS = 7.0
DEFAULT_IDLE_FRACTION = 0.15


def years_to_seconds(years: float) -> float:
    return float(years) * SECONDS_PER_YEAR


def seconds_to_years(seconds: float) -> float:
    return float(seconds) / SECONDS_PER_YEAR


def kg_to_g(kg: float) -> float:
    return float(kg) * GRAMS_PER_KG


def joules_to_kwh(joules: float) -> float:
    return float(joules) / JOULES_PER_KWH


def kwh_to_joules(kwh: float) -> float:
    return float(kwh) * JOULES_PER_KWH


class CarbonDomainError(ValueError):
    """A carbon-accounting input is outside its physical domain."""


@dataclass(frozen=True)
class GpuSpec:
    """One GPU type.

    ``embodied_carbon`` is in kg (as GPU datasheets and LCA tables report it);
    :func:`embodied_carbon` converts to grams. The three trailing fields are
    surrogate calibration knobs consumed by :mod:`carbonserve.hardware`.
    """

    name: str
    vram: float  # GiB
    mem_bandwidth: float  # GB/s
    chip_area: float  # mm^2
    max_power: float  # W
    idle_power: float  # W
    fp16_throughput: float  # TFLOPS
    embodied_carbon: float  # kgCO2
    release_year: int
    compute_efficiency: float = 0.6
    memory_efficiency: float = 0.8
    step_overhead: float = 0.0  # s per forward pass

    def __post_init__(self):
        for field in ("vram", "mem_bandwidth", "chip_area", "max_power",
                      "idle_power", "fp16_throughput", "embodied_carbon"):
            value = getattr(self, field)
            if not (math.isfinite(value) and value > 0):
                raise CarbonDomainError(f"GpuSpec {self.name!r}: {field} must be positive, got {value!r}")
        if self.idle_power >= self.max_power:
            raise CarbonDomainError(f"GpuSpec {self.name!r}: idle_power must be below max_power")
        for field in ("compute_efficiency", "memory_efficiency"):
            value = getattr(self, field)
            if not 0 < value <= 1:
                raise CarbonDomainError(f"GpuSpec {self.name!r}: {field} must be in (0, 1]")
        if self.step_overhead < 0:
            raise CarbonDomainError(f"GpuSpec {self.name!r}: step_overhead must be >= 0")

    @property
    def vram_bytes(self) -> float:
        return self.vram * BYTES_PER_GIB

    @property
    def embodied_grams(self) -> float:
        return kg_to_g(self.embodied_carbon)


@dataclass(frozen=True)
class GridProfile:
    region: str
    carbon_intensity: float  # gCO2/kWh

    def __post_init__(self):
        if not (math.isfinite(self.carbon_intensity) and self.carbon_intensity >= 0):
            raise CarbonDomainError(f"GridProfile {self.region!r}: carbon_intensity must be >= 0")


@dataclass(frozen=True)
class LifetimeAssumption:
    gpu: str
    lifetime: float = years_to_seconds(DEFAULT_LIFETIME_YEARS)  # s
    elapsed_service: float = 0.0  # s, reporting only

    def __post_init__(self):
        if not (math.isfinite(self.lifetime) and self.lifetime > 0):
            raise CarbonDomainError(f"lifetime for {self.gpu!r} must be positive")
        if self.elapsed_service < 0:
            raise CarbonDomainError(f"elapsed_service for {self.gpu!r} must be >= 0")

    @classmethod
    def years(cls, gpu: str, years: float, elapsed_years: float = 0.0) -> LifetimeAssumption:
        return cls(gpu, years_to_seconds(years), years_to_seconds(elapsed_years))


@dataclass(frozen=True)
class CarbonBreakdown:
    operational: float
    embodied: float
    total: float
    tokens: int = 0
    per_token: float = math.nan

    @classmethod
    def from_parts(cls, operational: float, embodied: float, tokens: int = 0) -> CarbonBreakdown:
        total = operational + embodied
        per_token = total / tokens if tokens > 0 else math.nan
        return cls(operational, embodied, total, tokens, per_token)

    @property
    def operational_per_token(self) -> float:
        return self.operational / self.tokens if self.tokens > 0 else math.nan

    @property
    def embodied_per_token(self) -> float:
        return self.embodied / self.tokens if self.tokens > 0 else math.nan


def embodied_carbon(busy_time: float, gpu: GpuSpec, lt: LifetimeAssumption) -> float:
    """Busy-time share of the GPU's lifetime embodied carbon, in grams."""
    if not math.isfinite(busy_time) or busy_time < 0:
        raise CarbonDomainError(f"busy_time must be finite and >= 0, got {busy_time!r}")
    return busy_time / lt.lifetime * gpu.embodied_grams


def operational_carbon(energy: float, grid: GridProfile) -> float:
    """Grid emissions for ``energy`` kWh, in grams."""
    if not math.isfinite(energy) or energy < 0:
        raise CarbonDomainError(f"energy must be finite and >= 0, got {energy!r}")
    return energy * grid.carbon_intensity


def total_carbon(
    busy_times: Sequence[float],
    energies: Sequence[float],
    gpus: Sequence[GpuSpec],
    lts: Sequence[LifetimeAssumption],
    grid: GridProfile,
    tokens: int = 0,
    extra_energy: float = 0.0,
) -> CarbonBreakdown:
    """Sum emissions over the GPUs taking part in one configuration.

    ``extra_energy`` (kWh) is charged operationally only; the simulator uses it
    for optional link energy.
    """
    n = len(gpus)
    if not (len(busy_times) == len(energies) == len(lts) == n):
        raise ValueError(
            "busy_times, energies, gpus and lts must have equal length, got "
            f"{len(busy_times)}, {len(energies)}, {n}, {len(lts)}"
        )
    operational = sum(operational_carbon(e, grid) for e in energies)
    if extra_energy:
        operational += operational_carbon(extra_energy, grid)
    embodied = sum(embodied_carbon(t, g, lt) for t, g, lt in zip(busy_times, gpus, lts))
    return CarbonBreakdown.from_parts(operational, embodied, tokens)


def lifetime_for(gpu: GpuSpec | str, lifetimes: Sequence[LifetimeAssumption] | dict) -> LifetimeAssumption:
    """Look up a GPU's lifetime, defaulting to seven years."""
    name = gpu if isinstance(gpu, str) else gpu.name
    items = lifetimes.values() if isinstance(lifetimes, dict) else lifetimes
    for lt in items:
        if lt.gpu == name:
            return lt
    return LifetimeAssumption(name)
