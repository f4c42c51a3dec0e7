"""Roofline latency/energy surrogate and the profiling database.

The surrogate stands in for measurements on real GPUs. Each forward pass costs

    max(compute_time, memory_time) + step_overhead

where ``compute_time`` is 2 FLOPs per parameter per token at the GPU's derated
FP16 throughput and ``memory_time`` streams the weights once at the derated
memory bandwidth. Power interpolates between idle and max by utilization,
which the simulator sets to ``roofline_time / latency`` for each pass.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .carbon import GpuSpec, GridProfile


class CapacityError(RuntimeError):
    """Weights plus KV cache do not fit in a GPU's memory."""

    def __init__(self, message: str, gpu: str | None = None, needed: float = 0.0, available: float = 0.0):
        super().__init__(message)
        self.gpu = gpu
        self.needed = needed
        self.available = available


class Phase(str, enum.Enum):
    PREFILL = "Prefill"
    DECODE = "Decode"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    params: float
    layers: int
    hidden_dim: int
    bytes_per_param: int = 2
    vocab_size: int = 32000

    def __post_init__(self):
        for f in ("params", "layers", "hidden_dim", "bytes_per_param", "vocab_size"):
            if not getattr(self, f) > 0:
                raise ValueError(f"ModelSpec {self.name!r}: {f} must be positive")

    @property
    def weight_bytes(self) -> float:
        return self.params * self.bytes_per_param

    @property
    def kv_bytes_per_token(self) -> int:
        return kv_cache_bytes(self, 1)


@dataclass(frozen=True)
class PhaseLoad:
    phase: Phase
    tokens_in_step: int
    batch_size: int = 1
    qps: float = 1.0

    def __post_init__(self):
        if self.tokens_in_step < 1:
            raise ValueError(f"tokens_in_step must be >= 1, got {self.tokens_in_step}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.qps > 0:
            raise ValueError(f"qps must be > 0, got {self.qps}")


def kv_cache_bytes(model: ModelSpec, seq_len: int) -> int:
    """Key and value tensors for ``seq_len`` tokens across all layers."""
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    return 2 * model.layers * model.hidden_dim * model.bytes_per_param * int(seq_len)


def check_capacity(gpu: GpuSpec, residents: Iterable[tuple[ModelSpec, int]]) -> float:
    """Raise :class:`CapacityError` unless every (model, kv_tokens) pair fits.

    Returns the bytes required.
    """
    needed = 0.0
    names = []
    for model, kv_tokens in residents:
        needed += model.weight_bytes + kv_cache_bytes(model, kv_tokens)
        names.append(model.name)
    if needed > gpu.vram_bytes:
        raise CapacityError(
            f"{'+'.join(names)} needs {needed / 2**30:.2f} GiB on {gpu.name} "
            f"({gpu.vram:g} GiB available)",
            gpu=gpu.name, needed=needed, available=gpu.vram_bytes,
        )
    return needed


def roofline_times(gpu: GpuSpec, model: ModelSpec, load: PhaseLoad) -> tuple[float, float]:
    """Return (compute_time, memory_time) for one forward pass."""
    tokens = load.tokens_in_step * load.batch_size
    compute = 2.0 * model.params * tokens / (gpu.fp16_throughput * 1e12 * gpu.compute_efficiency)
    memory = model.weight_bytes / (gpu.mem_bandwidth * 1e9 * gpu.memory_efficiency)
    return compute, memory


def phase_timing(gpu: GpuSpec, model: ModelSpec, load: PhaseLoad, kv_budget: float = 0.0) -> tuple[float, float]:
    """Return (latency, utilization) of one forward pass."""
    if model.weight_bytes + kv_budget > gpu.vram_bytes:
        raise CapacityError(
            f"{model.name} with {kv_budget:.0f} B of KV does not fit on {gpu.name}",
            gpu=gpu.name, needed=model.weight_bytes + kv_budget, available=gpu.vram_bytes,
        )
    roofline = max(roofline_times(gpu, model, load))
    latency = roofline + gpu.step_overhead
    return latency, min(1.0, roofline / latency)


def phase_latency(gpu: GpuSpec, model: ModelSpec, load: PhaseLoad, kv_budget: float = 0.0) -> float:
    """Queue-free latency of one prefill or decode pass, in seconds."""
    return phase_timing(gpu, model, load, kv_budget)[0]


def phase_energy(gpu: GpuSpec, latency: float, utilization: float) -> float:
    """Joules drawn over ``latency`` seconds at the given utilization."""
    if not 0.0 <= utilization <= 1.0:
        raise ValueError(f"utilization must be in [0, 1], got {utilization!r}")
    if latency < 0:
        raise ValueError("latency must be >= 0")
    return latency * (gpu.idle_power + utilization * (gpu.max_power - gpu.idle_power))


# ---------------------------------------------------------------------------
# profiling database

PROFILE_COLUMNS = (
    "config_id", "application_id", "qps", "mean_ttft_s", "mean_tpot_s",
    "energy_per_token_j", "carbon_per_token_g", "slo_attainment",
)


@dataclass
class ProfileRecord:
    config_id: str
    application_id: str
    qps: float
    mean_ttft: float
    mean_tpot: float
    energy_per_token: float
    carbon_per_token: float
    slo_attainment: float
    # not persisted; used for savings breakdowns
    operational_per_token: float = field(default=math.nan, compare=False)
    embodied_per_token: float = field(default=math.nan, compare=False)

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.carbon_per_token)

    @classmethod
    def infeasible(cls, config_id: str, application_id: str, qps: float) -> ProfileRecord:
        inf = math.inf
        return cls(config_id, application_id, qps, inf, inf, inf, inf, 0.0, inf, inf)

    def row(self) -> list:
        return [self.config_id, self.application_id, self.qps, self.mean_ttft, self.mean_tpot,
                self.energy_per_token, self.carbon_per_token, self.slo_attainment]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_profile_csv(records: Sequence[ProfileRecord], fh: io.TextIOBase, metadata: str | None = None) -> None:
    if metadata:
        fh.write(f"# {metadata}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PROFILE_COLUMNS)
    for rec in records:
        writer.writerow([_fmt(v) for v in rec.row()])


def read_profile_csv(fh: io.TextIOBase) -> list[ProfileRecord]:
    lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(PROFILE_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"profile database is missing columns: {sorted(missing)}")
    out = []
    for row in reader:
        out.append(ProfileRecord(
            row["config_id"], row["application_id"], float(row["qps"]),
            float(row["mean_ttft_s"]), float(row["mean_tpot_s"]),
            float(row["energy_per_token_j"]), float(row["carbon_per_token_g"]),
            float(row["slo_attainment"]),
        ))
    return out


def build_profile_database(
    configs: Sequence,
    apps: Sequence,
    qps_grid: Sequence[float],
    sim: Callable | None = None,
    **kwargs,
) -> list[ProfileRecord]:
    """Simulate every (config, app, qps) cell and summarize it.

    ``sim`` defaults to :func:`carbonserve.sim.simulate`. Keyword arguments
    (grid, lifetimes, link, seed, size, duration, n_jobs, utilization) go to
    :func:`carbonserve.experiments.profile_cells`; ``basis`` selects the
    embodied time basis.
    """
    from .experiments import profile_cells, records_from_cells

    if not configs or not apps or not qps_grid:
        raise ValueError("configs, apps and qps_grid must all be non-empty")
    basis = kwargs.pop("basis", "request")
    grid = kwargs.pop("grid", None) or GridProfile("CISO", 261.0)
    cells = profile_cells(configs, apps, qps_grid, sim=sim, **kwargs)
    return records_from_cells(cells, grid, kwargs.get("lifetimes", ()), basis)
