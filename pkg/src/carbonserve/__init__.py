"""Carbon accounting and scheduling for LLM serving on mixed GPU generations."""

__version__ = "0.1.0"

from .analysis import CaseParams, LifetimeParams, ci_sensitivity, lifetime_sensitivity, savings_ratio  # noqa: E402
from .carbon import (  # noqa: E402
    CarbonBreakdown, GpuSpec, GridProfile, LifetimeAssumption, embodied_carbon, operational_carbon, total_carbon,
)
from .config import ConfigError, Settings, load_settings  # noqa: E402
from .hardware import CapacityError, ModelSpec, PhaseLoad, ProfileRecord, phase_energy, phase_latency  # noqa: E402
from .scheduler import MatrixCompleter, PerfMatrices, SLOAwareScheduler, complete_matrices  # noqa: E402
from .sim import NetworkLink, ServingConfig, SimReport, Variant, simulate, slo_attainment  # noqa: E402
from .workload import ApplicationProfile, Trace, generate_trace  # noqa: E402

__all__ = [
    "ApplicationProfile", "CapacityError", "CarbonBreakdown", "CaseParams", "ConfigError", "GpuSpec", "GridProfile",
    "LifetimeAssumption", "LifetimeParams", "MatrixCompleter", "ModelSpec", "NetworkLink", "PerfMatrices",
    "PhaseLoad", "ProfileRecord", "SLOAwareScheduler", "ServingConfig", "Settings", "SimReport", "Trace", "Variant",
    "ci_sensitivity", "complete_matrices", "embodied_carbon", "generate_trace", "lifetime_sensitivity",
    "load_settings", "operational_carbon", "phase_energy", "phase_latency", "savings_ratio", "simulate", "slo_attainment",
    "total_carbon",
]
