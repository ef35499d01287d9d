"""Multi-hop path distortion: delay, lognormal jitter, loss, relay smoothing and padding defenses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from .shaper import TokenBucketConfig, shape
from .trace import FlowTrace
from .waveform import ModulationSpec, ValidationError, WaveKind


class Defense(str, Enum):
    NONE = "None"
    PAD_IDLE_GAPS = "PadIdleGaps"
    BURST_RESHAPE = "BurstReshape"


@dataclass(frozen=True)
class ChannelModel:
    """Per-flow path model.

    Each packet's one-way delay is ``base_delay * exp(jitter_sigma * Z)`` with
    standard normal ``Z`` (median ``base_delay``), clamped so packets never
    reorder. ``defense_params`` keys: ``threshold``, ``pad_interval``,
    ``pad_size`` for PadIdleGaps and ``burst_interval`` for BurstReshape.
    """

    base_delay: float = 0.05
    jitter_sigma: float = 0.0
    loss_prob: float = 0.0
    smoothing_rate: float | None = None
    smoothing_bucket: TokenBucketConfig | None = None
    defense: Defense = Defense.NONE
    defense_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "defense", Defense(self.defense))
        if isinstance(self.smoothing_bucket, dict):
            object.__setattr__(self, "smoothing_bucket", TokenBucketConfig.from_dict(self.smoothing_bucket))
        if not self.base_delay >= 0:
            raise ValidationError("base_delay must be >= 0")
        if not self.jitter_sigma >= 0:
            raise ValidationError("jitter_sigma must be >= 0")
        if not 0 <= self.loss_prob < 1:
            raise ValidationError("loss_prob must be in [0, 1)")
        if self.smoothing_rate is not None and not self.smoothing_rate > 0:
            raise ValidationError("smoothing_rate must be > 0")
        p = self.defense_params
        if self.defense is Defense.PAD_IDLE_GAPS:
            if p.get("threshold", 0.05) <= 0 or p.get("pad_interval", 0.02) <= 0:
                raise ValidationError("PadIdleGaps needs positive threshold and pad_interval")
            if not 64 <= p.get("pad_size", 600) <= 1500:
                raise ValidationError("pad_size must be in [64, 1500]")
        if self.defense is Defense.BURST_RESHAPE and p.get("burst_interval", 0.1) <= 0:
            raise ValidationError("burst_interval must be > 0")

    def to_dict(self):
        d = asdict(self)
        d["defense"] = self.defense.value
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown ChannelModel keys: {sorted(unknown)}")
        return cls(**d)


def pad_idle_gaps(flow: FlowTrace, threshold: float = 0.05, pad_interval: float = 0.02,
                  pad_size: int = 600) -> FlowTrace:
    """Insert dummy packets every ``pad_interval`` inside gaps longer than ``threshold``."""
    if len(flow) < 2:
        return flow
    thr_us = int(round(threshold * 1e6))
    pad_us = int(round(pad_interval * 1e6))
    ts = flow.ts_us
    gaps = np.diff(ts)
    counts = np.where(gaps > thr_us, gaps // pad_us, 0)
    if counts.sum() == 0:
        return flow
    new_ts, new_size, new_dir, new_dummy, new_h, new_p = [], [], [], [], [], []
    for i in range(len(flow)):
        new_ts.append(int(ts[i])); new_size.append(int(flow.size[i])); new_dir.append(int(flow.dir[i]))
        new_dummy.append(bool(flow.is_dummy[i])); new_h.append(flow.headers[i]); new_p.append(flow.payloads[i])
        if i < len(gaps):
            for j in range(1, int(counts[i]) + 1):
                new_ts.append(int(ts[i]) + j * pad_us); new_size.append(pad_size)
                new_dir.append(int(flow.dir[i])); new_dummy.append(True)
                new_h.append(b""); new_p.append(b"")
    # a dummy landing exactly on the next real packet sorts before it
    return FlowTrace(new_ts, new_size, new_dir, new_dummy, new_h, new_p,
                     flow_id=flow.flow_id, label=flow.label)


def burst_reshape(flow: FlowTrace, burst_interval: float = 0.1) -> FlowTrace:
    """Hold every packet until the next multiple of ``burst_interval``."""
    b = int(round(burst_interval * 1e6))
    ts = -(-flow.ts_us // b) * b
    return flow.with_times(ts)


def transmit(flow: FlowTrace, ch: ChannelModel) -> FlowTrace:
    """Carry ``flow`` across the modeled path and return what the exit observes."""
    rng = np.random.default_rng(ch.seed)
    p = ch.defense_params
    if ch.defense is Defense.PAD_IDLE_GAPS:
        flow = pad_idle_gaps(flow, p.get("threshold", 0.05), p.get("pad_interval", 0.02),
                             p.get("pad_size", 600))
    elif ch.defense is Defense.BURST_RESHAPE:
        flow = burst_reshape(flow, p.get("burst_interval", 0.1))

    if ch.smoothing_rate is not None:
        const = ModulationSpec(kind=WaveKind.SINE, r_base=ch.smoothing_rate, amplitude_A=0.0,
                               r_min=ch.smoothing_rate, r_max=ch.smoothing_rate)
        flow = shape(flow, const, ch.smoothing_bucket or TokenBucketConfig())

    n = len(flow)
    # draw both streams for every packet so the pattern does not depend on loss_prob
    u = rng.random(n)
    z = rng.standard_normal(n)
    keep = u >= ch.loss_prob
    delay_us = np.round(ch.base_delay * np.exp(ch.jitter_sigma * z) * 1e6).astype(np.int64)
    arrive = flow.ts_us + delay_us
    out = flow.take(keep)
    out_ts = np.maximum.accumulate(arrive[keep]) if keep.any() else np.zeros(0, np.int64)
    return out.with_times(out_ts)
