import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from carbonserve.hardware import ModelSpec
from carbonserve.specdecode import (
    DraftWindow, accept_count_pmf, acceptance_probability, expected_accepted, payload_sizes, sample_accept_count,
    sample_accept_counts,
)


def test_acceptance_probability_examples():
    assert acceptance_probability(0.4, 0.4) == 1
    assert acceptance_probability(0.0, 0.4) == 0
    assert acceptance_probability(0.3, 0.6) == 0.5
    with pytest.raises(ValueError):
        acceptance_probability(0.3, 0.0)
    with pytest.raises(ValueError):
        acceptance_probability(-0.1, 0.5)


@given(q=st.floats(0, 1), p=st.floats(1e-6, 1))
def test_acceptance_probability_bounded_and_scale_free(q, p):
    a = acceptance_probability(q, p)
    assert 0 <= a <= 1
    assert acceptance_probability(q / 2, p / 2) == pytest.approx(a)


def test_expected_examples():
    assert expected_accepted(DraftWindow(4, 0.0)) == 1
    assert expected_accepted(DraftWindow(4, 1.0)) == 5
    assert expected_accepted(DraftWindow(4, 0.8)) == pytest.approx(3.3616)


def test_window_invariants():
    with pytest.raises(ValueError):
        DraftWindow(0, 0.5)
    with pytest.raises(ValueError):
        DraftWindow(4, 1.5)


@given(k=st.integers(1, 8), a=st.floats(0.05, 0.99), da=st.floats(1e-3, 0.5))
def test_expected_monotone(k, a, da):
    w = DraftWindow(k, a)
    e = expected_accepted(w)
    assert e < expected_accepted(DraftWindow(k + 1, a))
    assert e < expected_accepted(DraftWindow(k, min(1.0, a + da)))
    assert e <= k + 1


def test_scalar_sampler_edges():
    rng = np.random.default_rng(0)
    assert {sample_accept_count(DraftWindow(4, 0.0), rng) for _ in range(50)} == {1}
    assert {sample_accept_count(DraftWindow(4, 1.0), rng) for _ in range(50)} == {5}


def test_scalar_sampler_is_deterministic():
    a = [sample_accept_count(DraftWindow(4, 0.7), np.random.default_rng(9)) for _ in range(3)]
    assert len(set(a)) == 1


def test_scalar_and_vector_agree_in_distribution():
    w = DraftWindow(4, 0.7)
    rng = np.random.default_rng(1)
    scalar = np.array([sample_accept_count(w, rng) for _ in range(100_000)])
    assert scalar.mean() == pytest.approx(expected_accepted(w), rel=0.01)
    counts = np.bincount(scalar, minlength=w.k + 2)[1:]
    assert stats.chisquare(counts, accept_count_pmf(w) * len(scalar)).pvalue > 0.01


def test_pmf_sums_to_one():
    for k in (1, 4, 8):
        for a in (0.0, 0.5, 1.0):
            pmf = accept_count_pmf(DraftWindow(k, a))
            assert pmf.sum() == pytest.approx(1.0)
            assert (pmf * np.arange(1, k + 2)).sum() == pytest.approx(expected_accepted(DraftWindow(k, a)))


def test_vector_sampler_bounds():
    c = sample_accept_counts(DraftWindow(3, 0.9), np.random.default_rng(0), 10_000)
    assert c.min() >= 1 and c.max() <= 4


def test_payload_examples():
    m = ModelSpec("m", 7e9, 32, 4096, vocab_size=32000)
    p = payload_sizes(m, 4, 2)
    assert (p.token_ids_bytes, p.probs_bytes) == (16, 256_000)
    assert p.total == 256_016
    for k in (1, 3, 9):
        q = payload_sizes(m, k, 2)
        assert q.probs_bytes / q.token_ids_bytes == 32000 * 2 / 4
    tiny = payload_sizes(ModelSpec("t", 1, 1, 1, vocab_size=1), 1, 2)
    assert tiny.probs_bytes == 2
    with pytest.raises(ValueError):
        payload_sizes(m, 0)
