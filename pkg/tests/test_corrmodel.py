import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bwmark import corrmodel as cm
from bwmark.waveform import ValidationError

from oracles import enumerate_corr

probs = st.floats(0.0, 1.0)


def test_worked_point():
    cp = cm.CorrelationParams(p_exit=0.10, p1=0.9965, p2=[0.975])
    assert cm.per_flow_success(cp, 1) == pytest.approx(0.09715875, abs=1e-12)
    assert cm.corr_single(0.09715875, 1) == pytest.approx(0.09715875, abs=1e-15)


def test_edge_values():
    assert cm.corr_single(0.3, 0) == 0.0
    assert cm.corr_single(0.0, 1e9) == 0.0
    assert cm.corr_single(1.0, 1) == 1.0
    assert cm.corr_temporal([]) == 0.0
    assert cm.corr_temporal([0.2, 1.0]) == 1.0
    # (1 - 1e-12)^(1e12) ~ e^-1 must survive without cancellation
    assert cm.corr_single(1e-12, 1e12) == pytest.approx(1 - math.exp(-1), rel=1e-9)
    assert cm.corr_single(1e-18, 1) == pytest.approx(1e-18, rel=1e-12)


def test_mixed_counts_matches_enumeration(rng):
    for _ in range(5):
        cp = cm.CorrelationParams(rng.uniform(0, 0.5), rng.uniform(0.5, 1), rng.uniform(0, 1, 3))
        for r_vec in itertools.product(range(4), repeat=3):
            q = [cm.per_flow_success(cp, i) for i in (1, 2, 3)]
            assert abs(cm.corr_mixed_counts(cp, r_vec) - enumerate_corr(q, r_vec)) <= 1e-12


def test_temporal_matches_direct_product(rng):
    for _ in range(20):
        P = rng.uniform(0, 1, rng.integers(1, 12))
        assert abs(cm.corr_temporal(P) - (1 - np.prod(1 - P))) <= 1e-12
    assert cm.corr_temporal_equal(0.2, 3) == pytest.approx(1 - 0.8 ** 3)


def test_mixture_uses_class_prior():
    cp = cm.CorrelationParams(0.2, 0.9, [0.5, 1.0], pi=[0.25, 0.75])
    assert cm.q_mixture(cp) == pytest.approx(0.2 * 0.9 * (0.125 + 0.75))
    assert cm.corr_mixed(cp, 2) == pytest.approx(1 - (1 - cm.q_mixture(cp)) ** 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 0.999), st.integers(0, 200))
def test_monotone_concave_in_r(q, r):
    d1 = cm.corr_single(q, r + 1) - cm.corr_single(q, r)
    d2 = cm.corr_single(q, r + 2) - cm.corr_single(q, r + 1)
    assert d1 >= 0 and d2 <= d1 + 1e-15


def test_concavity_grid(rng):
    for q in rng.uniform(0.001, 0.9, 10):
        for r in rng.integers(0, 50, 10):
            inc = [cm.corr_single(q, r + k + 1) - cm.corr_single(q, r + k) for k in range(2)]
            assert inc[1] <= inc[0] + 1e-15


@settings(max_examples=60, deadline=None)
@given(probs, probs, st.lists(probs, min_size=1, max_size=4), st.integers(0, 20))
def test_output_is_probability(pe, p1, p2, r):
    cp = cm.CorrelationParams(pe, p1, p2)
    v = cm.corr_mixed_counts(cp, [r] * cp.K)
    assert 0.0 <= v <= 1.0


def test_exit_probability():
    assert cm.exit_probability([1, 1, 2], [2]) == 0.5
    assert cm.exit_probability([1, 1], []) == 0.0
    with pytest.raises(ValidationError):
        cm.exit_probability([0, 0], [0])
    with pytest.raises(ValidationError):
        cm.exit_probability([1, -1], [0])
    with pytest.raises(ValidationError):
        cm.exit_probability([1, 1], [5])


@pytest.mark.parametrize("kw", [dict(p_exit=1.1, p1=0.5, p2=[0.5]),
                                dict(p_exit=0.1, p1=0.5, p2=[0.5, 0.5], pi=[0.3, 0.3]),
                                dict(p_exit=0.1, p1=0.5, p2=[]),
                                dict(p_exit=0.1, p1=0.5, p2=[0.5], pi=[0.5, 0.5])])
def test_param_validation(kw):
    with pytest.raises(ValidationError):
        cm.CorrelationParams(**kw)


def test_bad_counts():
    cp = cm.CorrelationParams(0.1, 0.9, [0.5, 0.5])
    with pytest.raises(ValidationError):
        cm.corr_mixed_counts(cp, [1])
    with pytest.raises(ValidationError):
        cm.corr_mixed_counts(cp, [1, -1])
    with pytest.raises(ValidationError):
        cm.per_flow_success(cp, 3)
    assert "independent" in cm.metadata()["assumptions"]
