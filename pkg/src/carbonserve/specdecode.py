"""Statistical model of speculative decoding.

Token-level verification is collapsed to a per-position acceptance rate:
each of the ``k`` draft tokens survives independently with probability
``acceptance_rate`` until the first rejection, and the target always emits
one extra token of its own (the correction on rejection, the bonus token on
full acceptance). A step therefore yields between 1 and ``k + 1`` tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOKEN_ID_BYTES = 4


@dataclass(frozen=True)
class DraftWindow:
    k: int = 4
    acceptance_rate: float = 0.6

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError(f"acceptance_rate must be in [0, 1], got {self.acceptance_rate}")


@dataclass(frozen=True)
class StepPayload:
    token_ids_bytes: int
    probs_bytes: int

    @property
    def total(self) -> int:
        return self.token_ids_bytes + self.probs_bytes


def acceptance_probability(q: float, p: float) -> float:
    """Probability the verifier keeps a draft token: ``min(1, q / p)``."""
    if not p > 0:
        raise ValueError("draft probability p must be > 0")
    if q < 0:
        raise ValueError("target probability q must be >= 0")
    return min(1.0, q / p)


def expected_accepted(window: DraftWindow) -> float:
    """Mean tokens emitted per verification step (accepted drafts + 1)."""
    a, k = window.acceptance_rate, window.k
    if a == 1.0:
        return float(k + 1)
    return (1.0 - a ** (k + 1)) / (1.0 - a)


def accept_count_pmf(window: DraftWindow) -> np.ndarray:
    """P(count = c) for c = 1..k+1, as an array indexed by c - 1."""
    a, k = window.acceptance_rate, window.k
    c = np.arange(1, k + 1)
    pmf = np.empty(k + 1)
    pmf[:k] = a ** (c - 1) * (1.0 - a)
    pmf[k] = a**k
    return pmf


def sample_accept_count(window: DraftWindow, rng: np.random.Generator) -> int:
    accepted = 0
    while accepted < window.k and rng.random() < window.acceptance_rate:
        accepted += 1
    return accepted + 1


def sample_accept_counts(window: DraftWindow, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized :func:`sample_accept_count` for ``size`` independent steps."""
    accepted = rng.random((size, window.k)) < window.acceptance_rate
    # index of first rejection, or k when every draft survives
    rejected = ~accepted
    first = np.where(rejected.any(axis=1), rejected.argmax(axis=1), window.k)
    return first + 1


def payload_sizes(model, k: int, bytes_per_prob: int = 2) -> StepPayload:
    """Bytes shipped from draft to target for one sequence in one step."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return StepPayload(k * TOKEN_ID_BYTES, k * model.vocab_size * bytes_per_prob)
