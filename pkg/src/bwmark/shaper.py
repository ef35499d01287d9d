"""Synthetic offered traffic and the time-varying token-bucket shaper."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from .trace import FlowTrace
from .waveform import ModulationSpec, ValidationError, WaveKind, eval_bounded


class SourceKind(str, Enum):
    CONSTANT = "ConstantRate"
    POISSON = "PoissonArrivals"
    BURSTY = "BurstyWeb"


@dataclass(frozen=True)
class SourceModel:
    kind: SourceKind = SourceKind.CONSTANT
    mean_rate: float = 1e5
    packet_size: int = 1000
    on_ms: float = 2000.0
    off_ms: float = 1000.0
    on_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if not self.mean_rate > 0:
            raise ValidationError("mean_rate must be > 0")
        if not 64 <= self.packet_size <= 1500:
            raise ValidationError("packet_size must be in [64, 1500]")
        if self.kind is SourceKind.BURSTY and (self.on_ms <= 0 or self.off_ms < 0):
            raise ValidationError("on_ms must be > 0 and off_ms >= 0")

    @property
    def burst_rate(self) -> float:
        # on-period rate that yields mean_rate on average
        if self.on_rate is not None:
            return self.on_rate
        return self.mean_rate * (self.on_ms + self.off_ms) / self.on_ms

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d)
        return cls(**d)


@dataclass(frozen=True)
class TokenBucketConfig:
    capacity: float = 1500.0
    update_interval: float = 0.1
    initial_tokens: float = 0.0

    def __post_init__(self):
        if not self.update_interval > 0:
            raise ValidationError("update_interval must be > 0")
        if not self.capacity > 0:
            raise ValidationError("capacity must be > 0")
        if not 0 <= self.initial_tokens <= self.capacity:
            raise ValidationError("initial_tokens must be in [0, capacity]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d)
        return cls(**d)


def _reject_unknown(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


def generate_source(model: SourceModel, duration: float, flow_id: str = "", label: int = 0) -> FlowTrace:
    """Offered client-to-exit packet stream over ``[0, duration)``."""
    if not duration > 0:
        raise ValidationError("duration must be > 0")
    size = model.packet_size
    dur_us = int(round(duration * 1e6))
    rng = np.random.default_rng(model.seed)
    if model.kind is SourceKind.CONSTANT:
        n = math.ceil(model.mean_rate * duration / size - 1e-9)
        ts = np.round(np.arange(n) * (size * 1e6 / model.mean_rate)).astype(np.int64)
    elif model.kind is SourceKind.POISSON:
        ts = _poisson_times(rng, model.mean_rate / size, 0.0, duration)
        ts = np.floor(ts * 1e6).astype(np.int64)
    else:
        chunks, t, on = [], 0.0, True
        rate_pps = model.burst_rate / size
        while t < duration:
            if on:
                length = rng.exponential(model.on_ms / 1e3)
                chunks.append(_poisson_times(rng, rate_pps, t, min(t + length, duration)))
            else:
                length = rng.exponential(model.off_ms / 1e3) if model.off_ms > 0 else 0.0
            t += length
            on = not on
        ts = np.floor(np.concatenate(chunks) * 1e6).astype(np.int64) if chunks else np.zeros(0, np.int64)
    ts = ts[ts < dur_us]
    return FlowTrace(ts, np.full(len(ts), size), flow_id=flow_id, label=label)


def _poisson_times(rng, rate, t0, t1):
    if rate <= 0 or t1 <= t0:
        return np.zeros(0)
    expected = (t1 - t0) * rate
    n = int(expected + 6 * math.sqrt(expected) + 16)
    out = t0 + np.cumsum(rng.exponential(1.0 / rate, size=n))
    while out[-1] < t1:
        out = np.concatenate([out, out[-1] + np.cumsum(rng.exponential(1.0 / rate, size=n))])
    return out[out < t1]


def step_refills(spec: ModulationSpec, t0: float, dt: float, n: int, substeps: int = 8) -> np.ndarray:
    """Tokens earned over each of the ``n`` steps ``[t0 + k dt, t0 + (k+1) dt)``.

    Each step is cut into ``substeps`` pieces; a piece earns its length
    times the smallest bounded rate among its start, midpoint and end. That
    never exceeds the exact integral on a monotone, convex or concave piece,
    so the rate law holds on the step grid, and the deficit shrinks
    quadratically with the piece length.
    """
    m = 2 * substeps
    ts = t0 + dt * (np.arange(n)[:, None] + np.arange(m + 1)[None, :] / m)
    r = eval_bounded(spec, ts)
    lo = np.minimum(np.minimum(r[:, :-1:2], r[:, 1::2]), r[:, 2::2])
    return lo.sum(1) * (dt / substeps)


def step_refill(spec: ModulationSpec, t0: float, dt: float, substeps: int = 8) -> float:
    return float(step_refills(spec, t0, dt, 1, substeps)[0])


_BLOCK = 1024


def shape(flow: FlowTrace, spec: ModulationSpec, bucket: TokenBucketConfig | None = None) -> FlowTrace:
    """Release ``flow`` through a token bucket refilled at the bounded rate of ``spec``.

    The queue is unbounded FIFO: packets are delayed, never dropped. Tokens
    are credited in lumps at the end of each ``update_interval`` step; a
    packet departs at the first instant at or after its arrival (and its
    predecessor's departure) where the bucket holds at least its size.
    A capacity below ``max packet + r_max * update_interval`` wastes credit
    while the queue is backlogged.
    """
    bucket = bucket or TokenBucketConfig()
    if len(flow) and int(flow.size.max()) > bucket.capacity:
        raise ValidationError("packet exceeds bucket capacity")
    if spec.kind is WaveKind.NATURAL or math.isinf(spec.r_min):
        return flow.with_times(flow.ts_us.copy())

    dt = bucket.update_interval
    cap = bucket.capacity
    tokens = bucket.initial_tokens
    refills = np.zeros(0)

    def refill(k):
        # credit earned over step k-1, landing at k dt
        nonlocal refills
        if k > len(refills):
            refills = np.concatenate([refills, step_refills(spec, len(refills) * dt, dt, _BLOCK)])
        return refills[k - 1]

    step = 0
    out = np.empty(len(flow), np.int64)
    prev = 0
    sizes = flow.size
    arrivals = flow.ts_us
    dt_us = dt * 1e6
    for i in range(len(flow)):
        t = max(int(arrivals[i]), prev)
        k = int(t // dt_us)
        while step < k:
            step += 1
            tokens = min(cap, tokens + refill(step))
        size = int(sizes[i])
        while tokens < size:
            step += 1
            tokens = min(cap, tokens + refill(step))
            t = max(t, int(math.ceil(step * dt_us - 1e-6)))
        tokens -= size
        out[i] = t
        prev = t
    return flow.with_times(out)


def source_to_json(model: SourceModel) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)
