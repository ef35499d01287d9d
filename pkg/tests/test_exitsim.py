import math

import numpy as np
import pytest

from bwmark import exitsim as es
from bwmark.waveform import ValidationError


def _random_net(rng):
    n_ex = int(rng.integers(2, 30))
    spec = es.NetworkSpec(n_relays=n_ex + 10, n_exit_guard=n_ex // 2, n_exit=n_ex - n_ex // 2,
                          n_guard=5, calibrate_anchor=False, random_exit_bw=True,
                          seed=int(rng.integers(1 << 30)))
    net = es.build_scaled_network(spec)
    k = int(rng.integers(1, n_ex))
    return es.inject_adversary(net, k, rng.uniform(27, 148, k))


def test_preset_calibration_anchor():
    net = es.build_scaled_network("paper-vi-a")
    assert len(net.relays) == 80 and len(net.exits) == 23
    g = es.inject_adversary(net, 1, 148.0)
    assert g.analytic_p_exit() == pytest.approx(0.0213, abs=1e-12)


def test_sweep_monotone_and_crosses_ten_percent():
    net = es.build_scaled_network("paper-vi-a")
    p = [es.inject_adversary(net, n, 148.0).analytic_p_exit() for n in range(10)]
    assert p[0] == 0 and all(b > a for a, b in zip(p, p[1:]))
    assert p[5] > 0.10


def test_mc_agrees_with_analytic(rng):
    for _ in range(10):
        g = _random_net(rng)
        p_hat, se = es.estimate_p_exit(g, 20_000, seed=int(rng.integers(1 << 30)))
        p = g.analytic_p_exit()
        assert abs(p_hat - p) <= 4 * math.sqrt(p * (1 - p) / 20_000)


def test_sample_exit_single_exit():
    relays = (es.Relay("a", 5, {es.EXIT}), es.Relay("b", 5, {es.GUARD}))
    net = es.ScaledNetwork(relays)
    assert es.sample_exit(net, np.random.default_rng(0)) == "a"
    # zero-weight exits are never chosen
    net2 = es.ScaledNetwork(relays + (es.Relay("c", 0, {es.EXIT}),))
    assert set(es.sample_exits(net2, np.random.default_rng(0), 1000)) == {0}


def test_exit_guard_counts_as_exit():
    relays = (es.Relay("eg", 1, {es.EXIT, es.GUARD}), es.Relay("e", 3, {es.EXIT}))
    net = es.inject_adversary(es.ScaledNetwork(relays), 1, 30.0)
    assert net.analytic_p_exit() == pytest.approx(30 / 33)
    assert es.GUARD in [r for r in net.relays if r.adversarial][0].flags


def test_inject_ties_and_errors():
    relays = tuple(es.Relay(f"e{i}", 10, {es.EXIT}) for i in (2, 0, 1))
    g = es.inject_adversary(es.ScaledNetwork(relays), 1, 50)
    assert [r.id for r in g.relays] == ["e2", "adv00", "e1"]
    with pytest.raises(ValidationError):
        es.inject_adversary(g, 3, 50)
    with pytest.raises(ValidationError):
        es.inject_adversary(g, 1, 500)
    assert es.inject_adversary(g, 1, 500, enforce_range=False).analytic_p_exit() > 0.9
    with pytest.raises(ValidationError):
        es.ScaledNetwork((es.Relay("g", 1, {es.GUARD}),))
    with pytest.raises(ValidationError):
        es.Relay("x", -1)
    with pytest.raises(ValidationError):
        es.NetworkSpec(n_relays=5, n_exit_guard=3, n_exit=3)
    with pytest.raises(ValidationError):
        es.build_scaled_network("nope")
    with pytest.raises(ValidationError):
        es.estimate_p_exit(g, 0)


def test_network_roundtrip_and_determinism():
    net = es.build_scaled_network(es.NetworkSpec(seed=4))
    assert es.ScaledNetwork.from_dict(net.to_dict()) == net
    assert es.build_scaled_network(es.NetworkSpec(seed=4)) == net
    spec = es.NetworkSpec(seed=4)
    assert es.NetworkSpec.from_dict(spec.to_dict()) == spec
    a = es.sweep(net, range(3), trials=5000, seed=1)
    assert a == es.sweep(net, range(3), trials=5000, seed=1)
    assert [r["n"] for r in a] == [0, 1, 2] and a[0]["p_hat"] == 0
