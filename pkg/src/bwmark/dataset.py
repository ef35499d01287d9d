"""Synthetic labeled corpus: source -> shaper -> channel -> exit-side capture."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import ChannelModel, Defense, transmit
from .shaper import SourceKind, SourceModel, TokenBucketConfig, generate_source, shape
from .trace import (FlowTrace, flow_to_jsonl, flows_to_strides, read_serialized_dataset,
                    segment_strides, stamp_headers, write_serialized_dataset)
from .waveform import ModulationSpec, ValidationError

CLASS_NAMES = ("natural", "sine", "square", "triangle")


@dataclass(frozen=True)
class TraceParams:
    M: int = 64
    H: int = 52
    P: int = 12
    L_s: int = 512

    @property
    def n_tokens(self) -> int:
        return -(-self.M * (self.H + self.P) * 8 // self.L_s)


@dataclass(frozen=True)
class DatasetConfig:
    """Everything that determines a generated corpus (together with the seed).

    Rates are bytes/s. Shaped classes share one shaper configuration; the
    offered load of shaped flows is ``overload`` times ``r_base`` so the
    bucket stays backlogged. Natural flows draw their mean rate log-uniformly
    from ``natural_rate_range`` (multiples of ``r_base``).
    """

    flows_per_class: int = 500
    n_classes: int = 4
    r_base: float = 1500.0
    amplitude_frac: float = 0.4
    period: float = 30.0
    square_high_frac: float = 1.6
    square_low_frac: float = 0.4
    overload: float = 3.0
    natural_rate_range: tuple = (0.5, 3.0)
    packet_size: int = 1500
    on_ms: float = 3000.0
    off_ms: float = 1000.0
    duration: float = 90.0
    update_interval: float = 0.1
    base_delay: float = 0.2
    jitter_sigma: float = 0.3
    loss_prob: float = 0.01
    defense_mix: dict = field(default_factory=dict)
    trace: TraceParams = field(default_factory=TraceParams)

    def __post_init__(self):
        if self.flows_per_class < 1:
            raise ValidationError("flows_per_class must be >= 1")
        if isinstance(self.trace, dict):
            object.__setattr__(self, "trace", TraceParams(**self.trace))
        object.__setattr__(self, "natural_rate_range", tuple(self.natural_rate_range))
        if sum(self.defense_mix.values()) > 1:
            raise ValidationError("defense_mix fractions must sum to <= 1")

    def modulation(self, label: int) -> ModulationSpec:
        f = 1.0 / self.period
        r, A = self.r_base, self.amplitude_frac * self.r_base
        if label == 0:
            return ModulationSpec.natural()
        if label == 1:
            return ModulationSpec.sine(r, A, f_mod=f)
        if label == 2:
            return ModulationSpec.square(self.square_high_frac * r, self.square_low_frac * r, f_mod=f)
        if label == 3:
            return ModulationSpec.triangle(r, A, f_mod=f)
        raise ValidationError(f"label {label} out of range")

    def to_dict(self):
        d = asdict(self)
        d["natural_rate_range"] = list(self.natural_rate_range)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown DatasetConfig keys: {sorted(unknown)}")
        return cls(**d)


def _flow_seed(seed: int, label: int, idx: int, stream: str) -> int:
    h = hashlib.sha256(f"{seed}:{label}:{idx}:{stream}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def make_flow(cfg: DatasetConfig, seed: int, label: int, idx: int, shaped: bool = True) -> FlowTrace:
    """Generate one observed flow. ``shaped=False`` skips the shaper (pipeline-diff checks)."""
    flow_id = f"{CLASS_NAMES[label]}-{idx:05d}"
    rng = np.random.default_rng(_flow_seed(seed, label, idx, "params"))
    if label == 0:
        lo, hi = cfg.natural_rate_range
        rate = cfg.r_base * float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    else:
        rate = cfg.overload * cfg.r_base
    src = SourceModel(SourceKind.BURSTY, mean_rate=rate, packet_size=cfg.packet_size,
                      on_ms=cfg.on_ms, off_ms=cfg.off_ms, seed=_flow_seed(seed, label, idx, "src"))
    # long enough for M packets even from the slowest source; later packets cannot
    # influence the first M departures of a FIFO pipeline, so the rest is cut
    duration = max(cfg.duration, 2.0 * cfg.trace.M * cfg.packet_size / rate)
    flow = generate_source(src, duration, flow_id=flow_id, label=label)
    flow = flow.head(cfg.trace.M * 2)
    spec = cfg.modulation(label)
    if shaped:
        # room for one packet plus a full step of credit, so none is wasted
        bucket = TokenBucketConfig(capacity=cfg.packet_size + spec.r_max * cfg.update_interval,
                                   update_interval=cfg.update_interval)
        flow = shape(flow, spec, bucket)
    defense, params = _pick_defense(cfg, rng)
    ch = ChannelModel(base_delay=cfg.base_delay, jitter_sigma=cfg.jitter_sigma,
                      loss_prob=cfg.loss_prob, defense=defense, defense_params=params,
                      seed=_flow_seed(seed, label, idx, "channel"))
    flow = transmit(flow, ch)
    flow = flow.head(cfg.trace.M * 2)
    return stamp_headers(flow, _flow_seed(seed, label, idx, "hdr"), payload_bytes=cfg.trace.P)


def _pick_defense(cfg, rng):
    u = rng.random()
    acc = 0.0
    for name, frac in sorted(cfg.defense_mix.items()):
        acc += frac
        if u < acc:
            d = Defense(name)
            if d is Defense.PAD_IDLE_GAPS:
                return d, {"threshold": 1.0, "pad_interval": 0.5, "pad_size": 600}
            return d, {"burst_interval": 0.5}
    return Defense.NONE, {}


def generate_flows(cfg: DatasetConfig, seed: int) -> list[FlowTrace]:
    labels = range(cfg.n_classes) if cfg.n_classes == 4 else range(4)
    return [make_flow(cfg, seed, label, i) for label in labels for i in range(cfg.flows_per_class)]


def to_arrays(flows, trace: TraceParams = TraceParams()):
    """Stride tensor ``(n, N, L_s)`` and label vector for a list of flows."""
    X = flows_to_strides(flows, trace.M, trace.H, trace.P, trace.L_s)
    y = np.array([f.label for f in flows], dtype=np.int64)
    return X, y


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_dataset(flows, cfg: DatasetConfig, seed: int, out_dir, tool_version: str) -> dict:
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    flows = sorted(flows, key=lambda f: f.flow_id)
    for f in flows:
        (out / "traces" / f"{f.flow_id}.jsonl").write_text(flow_to_jsonl(f))
    t = cfg.trace
    write_serialized_dataset(flows, out, t.M, t.H, t.P)
    manifest = {
        "flows": [{"flow_id": f.flow_id, "label": f.label, "trace": f"traces/{f.flow_id}.jsonl"}
                  for f in flows],
        "counts": {str(k): sum(f.label == k for f in flows) for k in range(4)},
        "trace_params": asdict(t),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    cfg_dict = cfg.to_dict()
    provenance = {"config": cfg_dict, "config_hash": config_hash(cfg_dict), "seed": seed,
                  "tool_version": tool_version}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True))
    return manifest


def load_strides(data_dir, L_s: int = 512):
    """Read a generated dataset back as ``(X, y, flow_ids)`` in flow-id order."""
    ids, labels, rows = [], [], []
    for fid, label, sf in read_serialized_dataset(data_dir):
        ids.append(fid)
        labels.append(label)
        rows.append(segment_strides(sf, L_s).strides)
    if not rows:
        raise ValidationError(f"no flows in {data_dir}")
    return np.stack(rows).astype(np.float32), np.array(labels, np.int64), ids
