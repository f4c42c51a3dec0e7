"""Seeded request traces with fixed per-run request sizes."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

PERCENTILES = ("P25", "P50", "P75")
TRACE_COLUMNS = ("id", "arrival_s", "input_tokens", "output_tokens")


@dataclass(frozen=True)
class ApplicationProfile:
    name: str
    ttft_slo: float
    tpot_slo: float
    size_percentiles: dict = field(default_factory=dict)  # "P50" -> (input, output)

    def __post_init__(self):
        if not (self.ttft_slo > 0 and self.tpot_slo > 0):
            raise ValueError(f"{self.name}: SLOs must be positive")
        ordered = [self.size_percentiles[p] for p in PERCENTILES if p in self.size_percentiles]
        for (i0, o0), (i1, o1) in zip(ordered, ordered[1:]):
            if i1 < i0 or o1 < o0:
                raise ValueError(f"{self.name}: request sizes must be non-decreasing in percentile")

    def __hash__(self):
        return hash((self.name, self.ttft_slo, self.tpot_slo))


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.arrival < 0:
            raise ValueError("arrival must be >= 0")
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError("token counts must be >= 1")


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    qps_label: float
    seed: int
    duration: float

    def __post_init__(self):
        arrivals = [r.arrival for r in self.requests]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("trace arrivals must be sorted ascending")
        if arrivals and arrivals[-1] >= self.duration:
            raise ValueError("every arrival must fall before the trace duration")

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def to_csv(self, fh: io.TextIOBase | None = None) -> str | None:
        buf = fh if fh is not None else io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.requests:
            writer.writerow([r.id, repr(float(r.arrival)), r.input_tokens, r.output_tokens])
        return buf.getvalue() if fh is None else None

    @classmethod
    def from_csv(cls, text: str, qps_label: float, seed: int, duration: float) -> Trace:
        reader = csv.DictReader(io.StringIO(text))
        reqs = tuple(
            Request(int(row["id"]), float(row["arrival_s"]), int(row["input_tokens"]), int(row["output_tokens"]))
            for row in reader
        )
        return cls(reqs, qps_label, seed, duration)


def percentile_size(app: ApplicationProfile, p: str) -> tuple[int, int]:
    try:
        inp, out = app.size_percentiles[p]
    except KeyError:
        raise KeyError(f"{app.name} has no request size for percentile {p!r}") from None
    return int(inp), int(out)


def generate_trace(
    app: ApplicationProfile,
    size: str,
    qps: float,
    duration: float,
    seed: int,
    arrival: str = "poisson",
) -> Trace:
    """Open-loop arrivals at rate ``qps`` over ``[0, duration)``.

    ``arrival="poisson"`` draws exponential gaps; ``"uniform"`` spaces requests
    exactly ``1/qps`` apart starting at 0.
    """
    if not qps > 0:
        raise ValueError("qps must be > 0")
    if duration < 0:
        raise ValueError("duration must be >= 0")
    inp, out = percentile_size(app, size)
    if arrival == "poisson":
        rng = np.random.default_rng(seed)
        times: list[float] = []
        t = 0.0
        # draw in chunks; expected count is qps * duration
        chunk = max(16, int(qps * duration * 1.2) + 16)
        while True:
            gaps = rng.exponential(1.0 / qps, size=chunk)
            stamps = t + np.cumsum(gaps)
            keep = stamps[stamps < duration]
            times.extend(keep.tolist())
            if keep.size < stamps.size:
                break
            t = float(stamps[-1])
    elif arrival == "uniform":
        n = int(np.ceil(duration * qps)) if duration > 0 else 0
        times = [i / qps for i in range(n) if i / qps < duration]
    else:
        raise ValueError(f"unknown arrival process {arrival!r}")
    reqs = tuple(Request(i, float(a), inp, out) for i, a in enumerate(times))
    return Trace(reqs, float(qps), int(seed), float(duration))
