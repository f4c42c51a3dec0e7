from dataclasses import replace

import pytest

from carbonserve.hardware import CapacityError, Phase, PhaseLoad, kv_cache_bytes, phase_latency
from carbonserve.sim import (
    GpuUsage, NetworkLink, RequestMetrics, ServingConfig, SimReport, Variant, dsd_step_time, peak_window_bits,
    simulate, slo_attainment, transfer_time,
)
from carbonserve.specdecode import DraftWindow, payload_sizes
from carbonserve.workload import ApplicationProfile, Request, Trace, generate_trace


def one_request(inp=160, out=140, at=0.0, duration=10.0):
    return Trace((Request(0, at, inp, out),), 1.0, 0, duration)


def test_transfer_time_examples():
    link = NetworkLink(16e9)
    assert transfer_time(0, link) == 0
    assert transfer_time(83_886_080, link) == pytest.approx(0.0419, abs=1e-4)
    slow = NetworkLink(8e9)
    assert transfer_time(1000, slow) == pytest.approx(2 * transfer_time(1000, link))
    assert transfer_time(0, NetworkLink(1e9, base_latency=0.002)) == 0.002
    with pytest.raises(ValueError):
        transfer_time(-1, link)


def test_link_invariants():
    with pytest.raises(ValueError):
        NetworkLink(0)
    with pytest.raises(ValueError):
        NetworkLink(1e9, base_latency=-1)


def test_config_invariants(gpus, models):
    a100, t4, m7, m1 = gpus["A100"], gpus["T4"], models["llama-7b"], models["llama-1b"]
    with pytest.raises(ValueError, match="old_gpu"):
        ServingConfig("x", Variant.DPD, a100, m7)
    with pytest.raises(ValueError, match="old_gpu"):
        ServingConfig("x", Variant.STANDALONE, a100, m7, old_gpu=t4)
    with pytest.raises(ValueError, match="draft"):
        ServingConfig("x", Variant.SPEC_COLOCATED, a100, m7)
    with pytest.raises(ValueError, match="draft"):
        ServingConfig("x", Variant.STANDALONE, a100, m7, draft_model=m1, draft_window=DraftWindow())
    with pytest.raises(ValueError):
        ServingConfig("x", "Bogus", a100, m7)
    assert ServingConfig("x", "DisgPrefillDecode", a100, m7, old_gpu=t4).gpus == [a100, t4]


def test_standalone_single_request(settings):
    cfg = settings.config("standalone-a100")
    r = simulate(cfg, one_request(at=1.5))
    lp = phase_latency(cfg.new_gpu, cfg.target_model, PhaseLoad(Phase.PREFILL, 160))
    ld = phase_latency(cfg.new_gpu, cfg.target_model, PhaseLoad(Phase.DECODE, 1))
    (m,) = r.per_request
    assert m.ttft == pytest.approx(lp)
    assert m.tpot_mean == pytest.approx(ld)
    assert m.finish == pytest.approx(1.5 + lp + 139 * ld)
    assert r.per_gpu[0].busy_time == pytest.approx(lp + 139 * ld)
    assert r.tokens_out == 140 and r.bytes_transferred == 0


def test_dsd_hidden_step_equals_reference(settings):
    cfg = settings.config("dsd-a100-t4-1b")
    r = simulate(cfg, one_request(), seed=4)
    assert r.steps
    for s in r.steps:
        assert s.hidden
        assert s.end - s.start == pytest.approx(s.draft + s.ids_transfer + s.verify)
        assert s.end - s.start == pytest.approx(dsd_step_time(s.draft, s.ids_transfer, s.verify, s.probs_transfer))


def test_dsd_exposed_probs_extend_the_step(settings):
    cfg = settings.config("dsd-a100-t4-1b")
    r = simulate(cfg, one_request(), NetworkLink(5e7), seed=4)
    for s in r.steps:
        assert not s.hidden
        assert s.end - s.start == pytest.approx(s.draft + s.ids_transfer + s.probs_transfer)


def test_dsd_work_and_bytes(settings):
    cfg = settings.config("dsd-a100-t4-1b")
    r = simulate(cfg, one_request(), seed=1)
    new, old = r.per_gpu
    prefill = phase_latency(cfg.new_gpu, cfg.target_model, PhaseLoad(Phase.PREFILL, 160))
    draft_prefill = phase_latency(cfg.old_gpu, cfg.draft_model, PhaseLoad(Phase.PREFILL, 160))
    assert new.busy_time == pytest.approx(prefill + sum(s.verify for s in r.steps))
    assert old.busy_time == pytest.approx(sum(s.draft for s in r.steps))
    assert r.steps[0].draft > draft_prefill
    payload = payload_sizes(cfg.target_model, cfg.draft_window.k, cfg.bytes_per_prob)
    assert r.bytes_transferred == sum(s.batch * payload.total for s in r.steps)


def test_dpd_bytes_and_first_decode(settings, apps):
    cfg = settings.config("dpd-a100-t4")
    trace = generate_trace(apps["ShareGPT"], "P50", 0.5, 30.0, 5)
    r = simulate(cfg, trace)
    assert r.bytes_transferred == sum(kv_cache_bytes(cfg.target_model, q.input_tokens + 1) for q in trace)
    single = simulate(cfg, one_request())
    (m,) = single.per_request
    prefill = phase_latency(cfg.new_gpu, cfg.target_model, PhaseLoad(Phase.PREFILL, 160))
    kv = transfer_time(kv_cache_bytes(cfg.target_model, 161), NetworkLink())
    decode = phase_latency(cfg.old_gpu, cfg.target_model, PhaseLoad(Phase.DECODE, 1))
    assert m.ttft == pytest.approx(prefill)
    assert m.tpot_mean == pytest.approx((kv + 139 * decode) / 139)


@pytest.mark.parametrize("cid", ["standalone-a100", "specdecode-a100-1b", "dpd-a100-v100", "dsd-a100-t4-300m"])
def test_report_properties(settings, apps, cid):
    cfg = settings.config(cid)
    trace = generate_trace(apps["ShareGPT"], "P50", 1.0, 20.0, 11)
    r = simulate(cfg, trace, seed=2)
    assert r.to_json() == simulate(cfg, trace, seed=2).to_json()
    assert r.tokens_out == sum(q.output_tokens for q in trace)
    assert len(r.per_request) == len(trace)
    min_prefill = phase_latency(cfg.new_gpu, cfg.target_model, PhaseLoad(Phase.PREFILL, 160))
    for q, m in zip(trace, r.per_request):
        assert m.request_id == q.id
        assert m.ttft >= min_prefill * (1 - 1e-12)
        assert m.finish > q.arrival + m.ttft
        assert m.tpot_mean > 0 and m.tpot_max >= m.tpot_mean * (1 - 1e-12)
    for g in r.per_gpu:
        assert 0 < g.busy_time <= r.wall_time
        assert g.energy > 0 and g.request_time > 0
    assert r.peak_bandwidth_demand >= 0


def test_speculative_seed_changes_outcome(settings):
    cfg = settings.config("specdecode-a100-300m")
    a = simulate(cfg, one_request(), seed=1).per_request[0].finish
    b = simulate(cfg, one_request(), seed=2).per_request[0].finish
    assert a != b


def test_oom_and_override(settings, apps):
    cfg = settings.config("dpd-a100-t4")
    trace = generate_trace(apps["LongBench"], "P50", 1.0, 20.0, 0)
    with pytest.raises(CapacityError):
        simulate(cfg, trace)
    r = simulate(cfg, trace, enforce_capacity=False)
    assert len(r.per_request) == len(trace)


def test_utilization_models(settings, apps):
    cfg = settings.config("standalone-a100")
    trace = generate_trace(apps["ShareGPT"], "P50", 1.0, 20.0, 0)
    roof = simulate(cfg, trace)
    duty = simulate(cfg, trace, utilization="duty")
    assert roof.per_gpu[0].busy_time == duty.per_gpu[0].busy_time
    assert roof.per_gpu[0].energy != duty.per_gpu[0].energy
    with pytest.raises(ValueError):
        simulate(cfg, trace, utilization="bogus")


def test_idle_energy_floor(settings):
    cfg = settings.config("standalone-a100")
    r = simulate(cfg, Trace((), 1.0, 0, 100.0))
    assert r.per_gpu[0].energy == pytest.approx(100 * cfg.new_gpu.idle_power / 3.6e6)


def test_overlap_flag(settings):
    fast = settings.config("dsd-a100-t4-1b")
    slow = replace(fast, overlap=False)
    link = NetworkLink(5e7)
    a = simulate(fast, one_request(), link, seed=3)
    b = simulate(slow, one_request(), link, seed=3)
    assert a.wall_time < b.wall_time
    for s in b.steps:
        assert s.end - s.start == pytest.approx(s.draft + s.ids_transfer + s.probs_transfer + s.verify)


def test_peak_window_bits():
    assert peak_window_bits([]) == 0
    assert peak_window_bits([(0.0, 0.5, 100.0)]) == pytest.approx(100)
    assert peak_window_bits([(0.0, 2.0, 100.0)]) == pytest.approx(50)
    assert peak_window_bits([(0.0, 0.1, 10.0), (0.95, 1.05, 10.0), (3.0, 3.1, 1.0)]) == pytest.approx(15)


def _report(pairs):
    reqs = [RequestMetrics(i, 0.0, t, p, 1.0, 2) for i, (t, p) in enumerate(pairs)]
    return SimReport("x", reqs, [GpuUsage("A100", 0, 0)], 0, 0, 2 * len(reqs), 1.0)


def test_slo_attainment_examples():
    app = ApplicationProfile("a", 0.2, 0.1)
    assert slo_attainment(_report([(0.1, 0.05)] * 3), app) == 1.0
    assert slo_attainment(_report([(0.3, 0.05), (0.1, 0.2)]), app) == 0.0
    assert slo_attainment(_report([(0.1, 0.05)] * 9 + [(0.5, 0.5)]), app) == pytest.approx(0.9)
    assert slo_attainment(_report([(0.2, 0.1)]), app) == 1.0
    with pytest.raises(ValueError):
        slo_attainment(_report([]), app)
