"""Closed-form correlation-probability model.

A watermarked flow is correlated when it exits through an adversarial
relay, the perturbation is detected, and its type is classified correctly;
the three events are treated as independent. Powers ``(1 - q)^r`` are
evaluated as ``exp(r * log1p(-q))`` so tiny ``q`` with huge ``r`` keeps
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .waveform import ValidationError

INDEPENDENCE_NOTE = ("first-order estimate: exit choice, detection, classification, flows and "
                     "observation windows are assumed independent")


def _check_prob(x, name):
    if not (0.0 <= x <= 1.0):
        raise ValidationError(f"{name} must be in [0, 1], got {x}")


@dataclass(frozen=True)
class CorrelationParams:
    p_exit: float
    p1: float
    p2: tuple
    pi: tuple = field(default=None)

    def __post_init__(self):
        p2 = tuple(float(v) for v in np.atleast_1d(self.p2))
        object.__setattr__(self, "p2", p2)
        if len(p2) < 1:
            raise ValidationError("need at least one perturbation type")
        pi = self.pi
        pi = tuple([1.0 / len(p2)] * len(p2)) if pi is None else tuple(float(v) for v in pi)
        object.__setattr__(self, "pi", pi)
        _check_prob(self.p_exit, "p_exit")
        _check_prob(self.p1, "p1")
        for i, v in enumerate(p2):
            _check_prob(v, f"p2[{i}]")
        if len(pi) != len(p2):
            raise ValidationError("pi and p2 must have the same length")
        for i, v in enumerate(pi):
            _check_prob(v, f"pi[{i}]")
        if abs(sum(pi) - 1.0) > 1e-12:
            raise ValidationError("pi must sum to 1")

    @property
    def K(self) -> int:
        return len(self.p2)


def _pow_complement(q: float, r: float) -> float:
    """``(1 - q) ** r`` computed stably."""
    if r == 0:
        return 1.0
    if q >= 1.0:
        return 0.0
    return math.exp(r * math.log1p(-q))


def exit_probability(all_weights: Sequence[float], bad_indices: Iterable[int]) -> float:
    """Fraction of total exit bandwidth held by the adversarial exits."""
    w = np.asarray(all_weights, dtype=float)
    if np.any(w < 0):
        raise ValidationError("bandwidth weights must be >= 0")
    total = w.sum()
    if total <= 0:
        raise ValidationError("total exit weight is 0")
    bad = sorted(set(bad_indices))
    if bad and (bad[0] < 0 or bad[-1] >= len(w)):
        raise ValidationError("bad index out of range")
    return float(w[bad].sum() / total) if bad else 0.0


def per_flow_success(cp: CorrelationParams, i: int) -> float:
    """Success probability for one flow of type ``i`` (1-based)."""
    if not 1 <= i <= cp.K:
        raise ValidationError(f"class index must be in 1..{cp.K}")
    return cp.p_exit * cp.p1 * cp.p2[i - 1]


def corr_single(q: float, r: float) -> float:
    """Probability at least one of ``r`` independent flows is correlated."""
    _check_prob(q, "q")
    if r < 0:
        raise ValidationError("r must be >= 0")
    return 1.0 - _pow_complement(q, r)


def corr_mixed_counts(cp: CorrelationParams, r_vec: Sequence[float]) -> float:
    r_vec = list(r_vec)
    if len(r_vec) != cp.K:
        raise ValidationError(f"r_vec must have length {cp.K}")
    if any(r < 0 for r in r_vec):
        raise ValidationError("counts must be >= 0")
    # product of complements, accumulated in log space
    log_fail = 0.0
    for i, r in enumerate(r_vec, start=1):
        if r == 0:
            continue
        q = per_flow_success(cp, i)
        if q >= 1.0:
            return 1.0
        log_fail += r * math.log1p(-q)
    return -math.expm1(log_fail)


def q_mixture(cp: CorrelationParams) -> float:
    return cp.p_exit * cp.p1 * sum(p * s for p, s in zip(cp.pi, cp.p2))


def corr_mixed(cp: CorrelationParams, r: float) -> float:
    return corr_single(q_mixture(cp), r)


def corr_temporal(P_list: Sequence[float]) -> float:
    """Cumulative success over windows with per-window probabilities ``P_list``."""
    log_fail = 0.0
    for t, p in enumerate(P_list):
        _check_prob(p, f"P[{t}]")
        if p >= 1.0:
            return 1.0
        log_fail += math.log1p(-p)
    return -math.expm1(log_fail)


def corr_temporal_equal(P: float, T: int) -> float:
    if T < 0:
        raise ValidationError("T must be >= 0")
    return corr_single(P, T)


def metadata() -> dict:
    return {"assumptions": INDEPENDENCE_NOTE}
