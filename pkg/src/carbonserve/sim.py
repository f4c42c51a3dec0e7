"""Discrete-event simulation of one serving configuration over a trace.

Each GPU and the network link is a serial resource. Work is issued at
resource-idle instants by a per-variant dispatch policy:

* prefill runs one request at a time, ahead of decode work, while the
  running batch has room (FIFO admission, no preemption);
* decode (or a speculative step) advances every running sequence at once,
  and new sequences join only at step boundaries (continuous batching).

Disaggregated speculative decoding follows this step schedule::

    old GPU: draft k tokens for the batch
    link:    token ids  -> then probabilities (queued behind the ids)
    new GPU: verify starts when the ids land
    step ends at max(verify end, probabilities landed)

With ``overlap=False`` verification waits for the probabilities too.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .carbon import GpuSpec, joules_to_kwh
from .hardware import (
    CapacityError,
    ModelSpec,
    Phase,
    PhaseLoad,
    check_capacity,
    kv_cache_bytes,
    phase_energy,
    phase_timing,
)
from .specdecode import DraftWindow, expected_accepted, payload_sizes, sample_accept_count
from .workload import ApplicationProfile, Trace

BANDWIDTH_WINDOW_S = 1.0


class Variant(str, enum.Enum):
    STANDALONE = "Standalone"
    SPEC_COLOCATED = "SpecDecodeColocated"
    DPD = "DisgPrefillDecode"
    DSD = "DisgSpecDecode"

    @property
    def disaggregated(self) -> bool:
        return self in (Variant.DPD, Variant.DSD)

    @property
    def speculative(self) -> bool:
        return self in (Variant.SPEC_COLOCATED, Variant.DSD)


@dataclass(frozen=True)
class ServingConfig:
    id: str
    variant: Variant
    new_gpu: GpuSpec
    target_model: ModelSpec
    old_gpu: GpuSpec | None = None
    draft_model: ModelSpec | None = None
    draft_window: DraftWindow | None = None
    max_batch: int = 16
    bytes_per_prob: int = 2
    overlap: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        v = self.variant
        if (self.old_gpu is not None) != v.disaggregated:
            raise ValueError(f"config {self.id!r}: old_gpu must be set iff the variant is disaggregated")
        has_draft = self.draft_model is not None and self.draft_window is not None
        if has_draft != v.speculative or ((self.draft_model is None) != (self.draft_window is None)):
            raise ValueError(f"config {self.id!r}: draft_model/draft_window must be set iff the variant is speculative")
        if self.max_batch < 1:
            raise ValueError(f"config {self.id!r}: max_batch must be >= 1")

    @property
    def gpus(self) -> list[GpuSpec]:
        return [self.new_gpu] if self.old_gpu is None else [self.new_gpu, self.old_gpu]


@dataclass(frozen=True)
class NetworkLink:
    bandwidth: float = 16e9  # bits/s
    base_latency: float = 0.0  # s
    energy_per_byte: float = 0.0  # J/B; zero treats communication as free

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("link bandwidth must be > 0")
        if self.base_latency < 0 or self.energy_per_byte < 0:
            raise ValueError("base_latency and energy_per_byte must be >= 0")


def transfer_time(payload: float, link: NetworkLink) -> float:
    if payload < 0:
        raise ValueError("payload must be >= 0")
    return link.base_latency + payload * 8.0 / link.bandwidth


def dsd_step_time(draft: float, ids: float, verify: float, probs: float, overlap: bool = True) -> float:
    """Length of one uncontended disaggregated speculative step."""
    if overlap:
        return draft + ids + max(verify, probs)
    return draft + ids + probs + verify


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    arrival: float
    ttft: float
    tpot_mean: float
    finish: float
    output_tokens: int
    tpot_max: float = 0.0


@dataclass(frozen=True)
class GpuUsage:
    gpu: str
    busy_time: float  # s
    energy: float  # kWh
    request_time: float = 0.0  # s, summed over requests resident on this GPU


@dataclass(frozen=True)
class DsdStep:
    start: float
    draft: float
    ids_transfer: float
    verify: float
    probs_transfer: float
    end: float
    batch: int

    @property
    def hidden(self) -> bool:
        return self.probs_transfer <= self.verify


@dataclass
class SimReport:
    config_id: str
    per_request: list[RequestMetrics]
    per_gpu: list[GpuUsage]
    bytes_transferred: int
    peak_bandwidth_demand: float  # bits/s
    tokens_out: int
    wall_time: float
    link_energy: float = 0.0  # kWh
    steps: list[DsdStep] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)

    @property
    def mean_ttft(self) -> float:
        return float(np.mean([r.ttft for r in self.per_request])) if self.per_request else math.nan

    @property
    def mean_tpot(self) -> float:
        return float(np.mean([r.tpot_mean for r in self.per_request])) if self.per_request else math.nan

    @property
    def energy_kwh(self) -> float:
        return sum(g.energy for g in self.per_gpu) + self.link_energy


def slo_attainment(report: SimReport, app: ApplicationProfile) -> float:
    """Fraction of requests meeting both the TTFT and the TPOT objective."""
    if not report.per_request:
        raise ValueError("slo_attainment is undefined for a report without requests")
    ok = sum(1 for r in report.per_request if r.ttft <= app.ttft_slo and r.tpot_mean <= app.tpot_slo)
    return ok / len(report.per_request)


def peak_window_bits(intervals: Sequence[tuple[float, float, float]], window: float = BANDWIDTH_WINDOW_S) -> float:
    """Largest number of bits carried by any ``window``-long span.

    ``intervals`` holds disjoint (start, end, bits) spans of positive length,
    bits spread evenly over each span, as a serial link produces them.
    """
    if not intervals:
        return 0.0
    spans = sorted(intervals)
    ts = np.empty(2 * len(spans))
    cum = np.empty(2 * len(spans))
    total = 0.0
    for i, (s, e, bits) in enumerate(spans):
        ts[2 * i] = s
        cum[2 * i] = total
        total += bits
        ts[2 * i + 1] = e
        cum[2 * i + 1] = total
    # window content is piecewise linear in its start, so the max sits where
    # either window edge meets a breakpoint
    cand = np.concatenate([ts, ts - window])
    inside = np.interp(cand + window, ts, cum) - np.interp(cand, ts, cum)
    return float(inside.max())


# ---------------------------------------------------------------------------
# engine


class _Seq:
    __slots__ = ("req", "rng", "tokens", "first", "finish", "last_token", "max_gap")

    def __init__(self, req, rng):
        self.req = req
        self.rng = rng
        self.tokens = 0
        self.first = math.nan
        self.finish = math.nan
        self.last_token = math.nan
        self.max_gap = 0.0

    @property
    def remaining(self) -> int:
        return self.req.output_tokens - self.tokens

    def emit(self, n: int, now: float) -> None:
        if self.tokens == 0:
            self.first = now
        else:
            self.max_gap = max(self.max_gap, (now - self.last_token) / n)
        self.tokens += n
        self.last_token = now
        if self.tokens >= self.req.output_tokens:
            self.finish = now


DUTY_WINDOW = 1.0  # seconds of history behind the "duty" utilization estimate
UTILIZATION_MODELS = ("roofline", "duty")


class _Gpu:
    def __init__(self, spec: GpuSpec, engine: _Engine):
        self.spec = spec
        self.engine = engine
        self.busy = False
        self.busy_time = 0.0
        self.energy_j = 0.0
        self.resident = 0.0  # bytes of dynamically reserved KV
        self.weights = 0.0
        self.history: deque = deque()  # busy spans inside the duty window
        self.request_time = 0.0
        self._entered: dict[int, float] = {}

    def enter(self, seq: _Seq) -> None:
        self._entered[seq.req.id] = self.engine.now

    def leave(self, seq: _Seq) -> None:
        t0 = self._entered.pop(seq.req.id, None)
        if t0 is not None:
            self.request_time += self.engine.now - t0

    def _duty(self, now: float, offered: float) -> float:
        """Busy fraction of the trailing window that ends with this pass."""
        w = self.engine.duty_window
        lo = now + offered - w
        while self.history and self.history[0][1] <= lo:
            self.history.popleft()
        busy = offered + sum(e - max(s, lo) for s, e in self.history)
        return min(1.0, busy / w)

    def run(self, passes: list[tuple[ModelSpec, PhaseLoad]], on_done: Callable[[], None]) -> float:
        now = self.engine.now
        latency = 0.0
        for model, load in passes:
            lat, util = phase_timing(self.spec, model, load)
            latency += lat
            if self.engine.utilization == "roofline":
                self.energy_j += phase_energy(self.spec, lat, util)
        if self.engine.utilization == "duty":
            self.energy_j += phase_energy(self.spec, latency, self._duty(now, latency))
        self.history.append((now, now + latency))
        self.busy = True
        self.busy_time += latency
        self.engine.at(self.engine.now + latency, self._finish, on_done)
        return latency

    def _finish(self, on_done):
        self.busy = False
        on_done()

    def reserve(self, nbytes: float) -> None:
        self.resident += nbytes
        if self.engine.enforce_capacity and self.weights + self.resident > self.spec.vram_bytes:
            raise CapacityError(
                f"KV residency on {self.spec.name} exceeded memory at t={self.engine.now:.3f}s",
                gpu=self.spec.name, needed=self.weights + self.resident, available=self.spec.vram_bytes,
            )

    def release(self, nbytes: float) -> None:
        self.resident -= nbytes


class _Link:
    def __init__(self, link: NetworkLink, engine: _Engine):
        self.link = link
        self.engine = engine
        self.queue: deque = deque()
        self.busy = False
        self.bytes = 0
        self.log: list[tuple[float, float, float]] = []

    def submit(self, nbytes: int, on_done: Callable[[float], None], on_start: Callable[[], None] | None = None):
        self.queue.append((nbytes, on_done, on_start))
        self._start()

    def _start(self):
        if self.busy or not self.queue:
            return
        nbytes, on_done, on_start = self.queue.popleft()
        if on_start is not None:
            on_start()
        now = self.engine.now
        dur = transfer_time(nbytes, self.link)
        self.busy = True
        self.bytes += nbytes
        if nbytes:
            self.log.append((now + self.link.base_latency, now + dur, nbytes * 8.0))
        self.engine.at(now + dur, self._finish, on_done, dur)

    def _finish(self, on_done, dur):
        self.busy = False
        on_done(dur)
        self._start()


class _Engine:
    def __init__(self, enforce_capacity: bool, utilization: str = "roofline", duty_window: float = DUTY_WINDOW):
        if utilization not in UTILIZATION_MODELS:
            raise ValueError(f"utilization must be one of {UTILIZATION_MODELS}, got {utilization!r}")
        self.now = 0.0
        self.utilization = utilization
        self.duty_window = duty_window
        self._heap: list = []
        self._counter = itertools.count()
        self.enforce_capacity = enforce_capacity
        self.after_event: Callable[[], None] = lambda: None

    def at(self, t: float, fn, *args):
        heapq.heappush(self._heap, (t, next(self._counter), fn, args))

    def run(self):
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)
            self.after_event()


class _Simulation:
    def __init__(self, config: ServingConfig, trace: Trace, link: NetworkLink, seed: int,
                 enforce_capacity: bool, utilization: str):
        self.cfg = config
        self.trace = trace
        self.seed = seed
        self.eng = _Engine(enforce_capacity, utilization)
        self.eng.after_event = self.dispatch
        self.new = _Gpu(config.new_gpu, self.eng)
        self.old = _Gpu(config.old_gpu, self.eng) if config.old_gpu is not None else None
        self.link = _Link(link, self.eng)
        self.waiting: deque[_Seq] = deque()  # arrived, awaiting prefill
        self.running: list[_Seq] = []
        self.ready: deque[_Seq] = deque()  # DPD: KV landed; DSD: target-prefilled
        self.done: list[_Seq] = []
        self.steps: list[DsdStep] = []
        self._step = None
        spec = config.variant.speculative
        for req in trace:
            rng = np.random.default_rng([seed, req.id]) if spec else None
            self.eng.at(req.arrival, self._arrive, _Seq(req, rng))
        self._set_weights()

    def _set_weights(self):
        v, c = self.cfg.variant, self.cfg
        self.new.weights = c.target_model.weight_bytes
        if v is Variant.SPEC_COLOCATED:
            self.new.weights += c.draft_model.weight_bytes
        if v is Variant.DPD:
            self.old.weights = c.target_model.weight_bytes
        if v is Variant.DSD:
            self.old.weights = c.draft_model.weight_bytes

    # -- events ----------------------------------------------------------

    def _arrive(self, seq: _Seq):
        self.waiting.append(seq)

    def _finish_seq(self, seq: _Seq):
        self.done.append(seq)
        self.new.leave(seq)
        if self.old is not None:
            self.old.leave(seq)

    def dispatch(self):
        v = self.cfg.variant
        if v in (Variant.STANDALONE, Variant.SPEC_COLOCATED):
            self._dispatch_colocated()
        elif v is Variant.DPD:
            self._dispatch_dpd()
        else:
            self._dispatch_dsd()

    # -- shared pieces ---------------------------------------------------

    def _prefill_passes(self, seq: _Seq, with_draft: bool) -> list:
        load = PhaseLoad(Phase.PREFILL, seq.req.input_tokens, 1)
        passes = [(self.cfg.target_model, load)]
        if with_draft:
            passes.append((self.cfg.draft_model, load))
        return passes

    def _decode_load(self, batch: int, tokens: int = 1) -> PhaseLoad:
        return PhaseLoad(Phase.DECODE, tokens, batch)

    def _after_step(self, batch: list[_Seq]):
        for s in batch:
            if s.remaining <= 0:
                self.running.remove(s)
                self._finish_seq(s)

    def _spec_emit(self, batch: list[_Seq]):
        now = self.eng.now
        window = self.cfg.draft_window
        for s in batch:
            n = min(sample_accept_count(window, s.rng), s.remaining)
            s.emit(n, now)

    # -- standalone and colocated speculative decoding -------------------

    def _dispatch_colocated(self):
        gpu = self.new
        if gpu.busy:
            return
        spec = self.cfg.variant is Variant.SPEC_COLOCATED
        if self.waiting and len(self.running) < self.cfg.max_batch:
            seq = self.waiting.popleft()
            gpu.enter(seq)

            def prefilled(seq=seq):
                seq.emit(1, self.eng.now)
                if seq.remaining <= 0:
                    self._finish_seq(seq)
                else:
                    self.running.append(seq)

            gpu.run(self._prefill_passes(seq, spec), prefilled)
        elif self.running:
            batch = list(self.running)
            b = len(batch)
            if spec:
                k = self.cfg.draft_window.k
                passes = [(self.cfg.draft_model, self._decode_load(b))] * k
                passes.append((self.cfg.target_model, self._decode_load(b, k + 1)))

                def stepped(batch=batch):
                    self._spec_emit(batch)
                    self._after_step(batch)
            else:
                passes = [(self.cfg.target_model, self._decode_load(b))]

                def stepped(batch=batch):
                    now = self.eng.now
                    for s in batch:
                        s.emit(1, now)
                    self._after_step(batch)

            gpu.run(passes, stepped)

    # -- prefill/decode disaggregation ------------------------------------

    def _kv_reservation(self, seq: _Seq) -> int:
        return kv_cache_bytes(self.cfg.target_model, seq.req.input_tokens + seq.req.output_tokens)

    def _dispatch_dpd(self):
        cfg = self.cfg
        if not self.new.busy and self.waiting:
            seq = self.waiting.popleft()
            staged = kv_cache_bytes(cfg.target_model, seq.req.input_tokens + 1)
            self.new.reserve(staged)
            self.new.enter(seq)

            def prefilled(seq=seq, staged=staged):
                seq.emit(1, self.eng.now)
                if seq.remaining <= 0:
                    self.new.release(staged)
                    self._finish_seq(seq)
                    return
                nbytes = staged

                def start(seq=seq):
                    self.old.reserve(self._kv_reservation(seq))

                def landed(_dur, seq=seq, staged=staged):
                    self.new.release(staged)
                    self.new.leave(seq)
                    self.old.enter(seq)
                    self.ready.append(seq)

                self.link.submit(nbytes, landed, start)

            self.new.run(self._prefill_passes(seq, False), prefilled)

        if not self.old.busy:
            while self.ready and len(self.running) < cfg.max_batch:
                self.running.append(self.ready.popleft())
            if self.running:
                batch = list(self.running)

                def stepped(batch=batch):
                    now = self.eng.now
                    for s in batch:
                        s.emit(1, now)
                        if s.remaining <= 0:
                            self.old.release(self._kv_reservation(s))
                    self._after_step(batch)

                self.old.run([(cfg.target_model, self._decode_load(len(batch)))], stepped)

    # -- disaggregated speculative decoding -------------------------------

    def _dispatch_dsd(self):
        cfg = self.cfg
        st = self._step
        if not self.new.busy:
            if st is not None and st["verify_ready"] and not st["verify_started"]:
                st["verify_started"] = True
                st["verify_start"] = self.eng.now
                b = len(st["batch"])
                load = self._decode_load(b, cfg.draft_window.k + 1)

                def verified(st=st):
                    st["verify_end"] = self.eng.now
                    self._maybe_complete(st)

                st["verify"] = self.new.run([(cfg.target_model, load)], verified)
            elif self.waiting and len(self.running) + len(self.ready) < cfg.max_batch:
                seq = self.waiting.popleft()
                self.new.enter(seq)

                def prefilled(seq=seq):
                    seq.emit(1, self.eng.now)
                    if seq.remaining <= 0:
                        self._finish_seq(seq)
                    else:
                        self.ready.append(seq)

                self.new.run(self._prefill_passes(seq, False), prefilled)

        if self._step is None and not self.old.busy:
            joiners = []
            while self.ready and len(self.running) < cfg.max_batch:
                seq = self.ready.popleft()
                joiners.append(seq)
                self.running.append(seq)
                self.old.enter(seq)
            if not self.running:
                return
            batch = list(self.running)
            k = cfg.draft_window.k
            passes = [(cfg.draft_model, PhaseLoad(Phase.PREFILL, s.req.input_tokens, 1)) for s in joiners]
            passes += [(cfg.draft_model, self._decode_load(len(batch)))] * k
            st = {
                "batch": batch, "start": self.eng.now, "verify_ready": False, "verify_started": False,
                "verify_end": None, "probs_end": None, "ids": 0.0, "probs": 0.0, "verify": 0.0,
            }
            self._step = st

            def drafted(st=st):
                st["draft_end"] = self.eng.now
                payload = payload_sizes(cfg.target_model, k, cfg.bytes_per_prob)
                b = len(st["batch"])

                def ids_landed(dur, st=st):
                    st["ids"] = dur
                    if cfg.overlap:
                        st["verify_ready"] = True

                def probs_landed(dur, st=st):
                    st["probs"] = dur
                    st["probs_end"] = self.eng.now
                    if not cfg.overlap:
                        st["verify_ready"] = True
                    self._maybe_complete(st)

                self.link.submit(b * payload.token_ids_bytes, ids_landed)
                self.link.submit(b * payload.probs_bytes, probs_landed)

            st["draft"] = self.old.run(passes, drafted)

    def _maybe_complete(self, st):
        if st["verify_end"] is None or st["probs_end"] is None:
            return
        batch = st["batch"]
        self._spec_emit(batch)
        self._after_step(batch)
        self.steps.append(DsdStep(
            st["start"], st["draft"], st["ids"], st["verify"], st["probs"], self.eng.now, len(batch),
        ))
        self._step = None

    # -- results ----------------------------------------------------------

    def report(self) -> SimReport:
        per_request = []
        for s in sorted(self.done, key=lambda s: s.req.id):
            n = s.req.output_tokens
            tpot = (s.finish - s.first) / (n - 1) if n > 1 else 0.0
            per_request.append(RequestMetrics(
                s.req.id, s.req.arrival, s.first - s.req.arrival, tpot, s.finish, n, s.max_gap,
            ))
        gpus = [self.new] + ([self.old] if self.old is not None else [])
        wall = max((r.finish for r in per_request), default=0.0)
        # allocated GPUs draw idle power whenever they are not running a pass
        window = max(wall, self.trace.duration)
        per_gpu = [
            GpuUsage(g.spec.name, g.busy_time,
                     joules_to_kwh(g.energy_j + phase_energy(g.spec, max(0.0, window - g.busy_time), 0.0)),
                     g.request_time)
            for g in gpus
        ]
        peak = peak_window_bits(self.link.log) / BANDWIDTH_WINDOW_S
        link_energy = joules_to_kwh(self.link.bytes * self.link.link.energy_per_byte)
        return SimReport(
            self.cfg.id, per_request, per_gpu, int(self.link.bytes), peak,
            sum(r.output_tokens for r in per_request), wall, link_energy, self.steps,
        )


def check_config_capacity(config: ServingConfig, trace: Trace) -> None:
    """Static memory check: ``max_batch`` sequences of the longest request."""
    if not len(trace):
        return
    seq = max(r.input_tokens + r.output_tokens for r in trace)
    kv = config.max_batch * seq
    v = config.variant
    if v is Variant.STANDALONE:
        check_capacity(config.new_gpu, [(config.target_model, kv)])
    elif v is Variant.SPEC_COLOCATED:
        check_capacity(config.new_gpu, [(config.target_model, kv), (config.draft_model, kv)])
    elif v is Variant.DPD:
        check_capacity(config.new_gpu, [(config.target_model, kv)])
        check_capacity(config.old_gpu, [(config.target_model, kv)])
    else:
        check_capacity(config.new_gpu, [(config.target_model, kv)])
        check_capacity(config.old_gpu, [(config.draft_model, kv)])


def simulate(
    config: ServingConfig,
    trace: Trace,
    link: NetworkLink | None = None,
    seed: int = 0,
    enforce_capacity: bool = True,
    utilization: str = "roofline",
) -> SimReport:
    """Run ``trace`` through ``config`` and collect latency, energy and traffic.

    Raises :class:`CapacityError` when the configuration cannot hold its
    weights and KV cache; ``enforce_capacity=False`` skips both the static
    and the dynamic check (useful for measuring link demand alone).

    ``utilization`` picks the power draw during a pass: ``"roofline"`` uses
    the pass's roofline/latency ratio, ``"duty"`` the GPU's busy fraction
    over the trailing second. Gaps between passes draw idle power either way.
    """
    link = link or NetworkLink()
    if enforce_capacity:
        check_config_capacity(config, trace)
    sim = _Simulation(config, trace, link, seed, enforce_capacity, utilization)
    sim.eng.run()
    unfinished = len(trace) - len(sim.done)
    if unfinished:
        raise RuntimeError(f"simulation of {config.id} stalled with {unfinished} unfinished requests")
    return sim.report()


def expected_tokens_per_step(config: ServingConfig) -> float:
    return expected_accepted(config.draft_window) if config.variant.speculative else 1.0
