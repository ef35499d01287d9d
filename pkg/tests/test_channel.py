import numpy as np
import pytest

from bwmark.channel import ChannelModel, Defense, burst_reshape, pad_idle_gaps, transmit
from bwmark.shaper import SourceKind, SourceModel, TokenBucketConfig, generate_source, shape
from bwmark.trace import FlowTrace, flow_to_jsonl, throughput_bins
from bwmark.waveform import ModulationSpec, ValidationError, eval_bounded


def _flow(n=200, seed=0):
    return generate_source(SourceModel(SourceKind.POISSON, 2e4, 1000, seed=seed), n * 0.05)


def test_pure_translation():
    f = _flow()
    out = transmit(f, ChannelModel(base_delay=0.25))
    np.testing.assert_array_equal(out.ts_us, f.ts_us + 250_000)
    np.testing.assert_array_equal(out.size, f.size)


def test_loss_binomial():
    f = FlowTrace(np.arange(10_000) * 1000, np.full(10_000, 500))
    out = transmit(f, ChannelModel(loss_prob=0.05, seed=9))
    n, p = 10_000, 0.05
    assert abs(len(out) - n * (1 - p)) <= 3 * np.sqrt(n * p * (1 - p))


def test_fifo_and_bytes_preserved_with_jitter():
    f = _flow(2000, seed=4)
    out = transmit(f, ChannelModel(base_delay=0.1, jitter_sigma=0.6, loss_prob=0.03, seed=5))
    assert np.all(np.diff(out.ts_us) >= 0)
    # survivors are a subsequence with their sizes intact
    assert out.size.sum() <= f.size.sum()
    assert len(out) < len(f)


def test_survivor_order_matches_input():
    sizes = np.arange(64, 64 + 500)
    f = FlowTrace(np.arange(500) * 2000, sizes)
    out = transmit(f, ChannelModel(base_delay=0.05, jitter_sigma=0.5, loss_prob=0.1, seed=1))
    assert np.all(np.diff(out.size) > 0)


def test_fifo_clamp_recurrence():
    f = _flow(500, seed=2)
    ch = ChannelModel(base_delay=0.05, jitter_sigma=0.8, seed=11)
    out = transmit(f, ch)
    rng = np.random.default_rng(11)
    rng.random(len(f))
    z = rng.standard_normal(len(f))
    arrive = f.ts_us + np.round(0.05 * np.exp(0.8 * z) * 1e6).astype(np.int64)
    ref = []
    for a in arrive:
        ref.append(max(ref[-1], a) if ref else a)
    np.testing.assert_array_equal(out.ts_us, ref)


def test_deterministic():
    f = _flow(300, seed=3)
    ch = ChannelModel(base_delay=0.1, jitter_sigma=0.3, loss_prob=0.01, seed=77)
    assert flow_to_jsonl(transmit(f, ch)) == flow_to_jsonl(transmit(f, ch))


def test_pad_idle_gaps_gap_walk():
    f = FlowTrace([0, 10_000, 1_010_000, 1_020_000], [500] * 4)
    out = pad_idle_gaps(f, threshold=0.05, pad_interval=0.02, pad_size=600)
    assert out.is_dummy.sum() == 1_000_000 // 20_000
    dummies = out.ts_us[out.is_dummy]
    assert dummies.min() > 10_000 and dummies.max() <= 1_010_000
    assert np.all(out.size[out.is_dummy] == 600)
    assert np.all(np.diff(out.ts_us) >= 0)


def test_pad_leaves_small_gaps():
    f = FlowTrace(np.arange(10) * 10_000, [500] * 10)
    assert pad_idle_gaps(f, threshold=0.05) == f


def test_burst_reshape_cadence():
    f = FlowTrace([0, 1, 99_999, 100_000, 100_001, 250_000], [100] * 6)
    out = burst_reshape(f, 0.1)
    np.testing.assert_array_equal(out.ts_us, [0, 100_000, 100_000, 100_000, 200_000, 300_000])


def test_defense_through_transmit():
    f = FlowTrace([0, 2_000_000], [500, 500])
    ch = ChannelModel(base_delay=0.0, defense=Defense.PAD_IDLE_GAPS,
                      defense_params={"threshold": 0.5, "pad_interval": 0.5, "pad_size": 700})
    out = transmit(f, ch)
    assert out.is_dummy.sum() == 4


def test_smoothing_rate_limits():
    f = FlowTrace(np.zeros(50, np.int64), np.full(50, 1000))
    out = transmit(f, ChannelModel(base_delay=0.0, smoothing_rate=1e4,
                                   smoothing_bucket=TokenBucketConfig(capacity=2000)))
    assert out.ts_us[-1] / 1e6 == pytest.approx(50 * 1000 / 1e4, abs=0.2)


def test_validation_and_json():
    with pytest.raises(ValidationError):
        ChannelModel(loss_prob=1.0)
    with pytest.raises(ValidationError):
        ChannelModel(base_delay=-1)
    with pytest.raises(ValidationError):
        ChannelModel.from_dict({"bogus": 1})
    ch = ChannelModel(jitter_sigma=0.3, defense="BurstReshape", defense_params={"burst_interval": 0.2})
    assert ChannelModel.from_dict(ch.to_dict()) == ch


def _xcorr_peak(a, b):
    a = (a - a.mean()) / (a.std() + 1e-12)
    b = (b - b.mean()) / (b.std() + 1e-12)
    n = len(a)
    return max(np.dot(a[k:], b[:n - k]) / n for k in range(0, 5))


@pytest.mark.parametrize("jitter,loss", [(0.1, 0.0), (0.3, 0.01)])
def test_throughput_shape_survives_channel(jitter, loss):
    base = 2e4
    specs = {"sine": ModulationSpec.sine(base, 0.4 * base),
             "square": ModulationSpec.square(1.6 * base, 0.4 * base),
             "triangle": ModulationSpec.triangle(base, 0.4 * base)}
    src = generate_source(SourceModel(SourceKind.CONSTANT, 3 * base, 1000), 150.0)
    ts = np.arange(150) + 0.5
    for name, spec in specs.items():
        shaped = shape(src, spec, TokenBucketConfig(capacity=1000 + spec.r_max * 0.1))
        out = transmit(shaped, ChannelModel(base_delay=0.2, jitter_sigma=jitter, loss_prob=loss, seed=3))
        tp = throughput_bins(out, 1.0)[:150]
        scores = {k: _xcorr_peak(tp, eval_bounded(s, ts)[:len(tp)]) for k, s in specs.items()}
        assert max(scores, key=scores.get) == name, (name, scores)
