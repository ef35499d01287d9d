"""Packet/flow data model, fixed-length bit serialization, stride tokens and timing statistics."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .waveform import ValidationError

N_LABELS = 4

# IPv4 + TCP with the timestamp option (NOP, NOP, kind 8, len 10, TSval, TSecr)
IPV4_TCP_TS_HEADER_LEN = 52

# address-bearing bytes of an IPv4/TCP header: IP checksum, src, dst, ports, TCP checksum
_ANON_RANGES = ((10, 12), (12, 20), (20, 24), (36, 38))


@dataclass(frozen=True)
class PacketRecord:
    ts_us: int
    size: int
    dir: int = 1
    header: bytes = b""
    payload: bytes = b""
    is_dummy: bool = False

    def __post_init__(self):
        if self.ts_us < 0:
            raise ValidationError("ts_us must be >= 0")
        if self.dir not in (1, -1):
            raise ValidationError("dir must be +1 or -1")
        if self.size < len(self.header) + len(self.payload):
            raise ValidationError("size smaller than header + payload")


class FlowTrace:
    """Columnar packet sequence of one flow.

    Timestamps, sizes, directions and dummy flags live in numpy arrays;
    header and payload bytes are optional per-packet lists (empty until the
    flow is observed by :func:`stamp_headers`).
    """

    def __init__(self, ts_us, size, dir=None, is_dummy=None, headers=None, payloads=None,
                 flow_id: str = "", label: int = 0):
        self.ts_us = np.asarray(ts_us, dtype=np.int64).reshape(-1)
        n = len(self.ts_us)
        self.size = np.asarray(size, dtype=np.int64).reshape(-1)
        self.dir = np.ones(n, np.int8) if dir is None else np.asarray(dir, dtype=np.int8).reshape(-1)
        self.is_dummy = (np.zeros(n, bool) if is_dummy is None
                         else np.asarray(is_dummy, dtype=bool).reshape(-1))
        self.headers = list(headers) if headers is not None else [b""] * n
        self.payloads = list(payloads) if payloads is not None else [b""] * n
        self.flow_id = flow_id
        self.label = int(label)
        if not (len(self.size) == len(self.dir) == len(self.is_dummy) == len(self.headers)
                == len(self.payloads) == n):
            raise ValidationError("column lengths differ")
        if n and (np.any(np.diff(self.ts_us) < 0) or self.ts_us[0] < 0):
            raise ValidationError("packets must have nondecreasing ts_us >= 0")
        if not 0 <= self.label < N_LABELS:
            raise ValidationError(f"label must be in 0..{N_LABELS - 1}")

    def __len__(self):
        return len(self.ts_us)

    def __repr__(self):
        return f"FlowTrace(flow_id={self.flow_id!r}, label={self.label}, packets={len(self)})"

    def __eq__(self, other):
        if not isinstance(other, FlowTrace):
            return NotImplemented
        return (self.flow_id == other.flow_id and self.label == other.label
                and np.array_equal(self.ts_us, other.ts_us)
                and np.array_equal(self.size, other.size)
                and np.array_equal(self.dir, other.dir)
                and np.array_equal(self.is_dummy, other.is_dummy)
                and self.headers == other.headers and self.payloads == other.payloads)

    @property
    def ts(self) -> np.ndarray:
        """Timestamps in seconds."""
        return self.ts_us / 1e6

    @property
    def packets(self) -> list[PacketRecord]:
        return [PacketRecord(int(t), int(s), int(d), h, p, bool(x)) for t, s, d, h, p, x in
                zip(self.ts_us, self.size, self.dir, self.headers, self.payloads, self.is_dummy)]

    @classmethod
    def from_packets(cls, packets: Sequence[PacketRecord], flow_id="", label=0) -> "FlowTrace":
        return cls([p.ts_us for p in packets], [p.size for p in packets],
                   [p.dir for p in packets], [p.is_dummy for p in packets],
                   [p.header for p in packets], [p.payload for p in packets],
                   flow_id=flow_id, label=label)

    def take(self, idx) -> "FlowTrace":
        """Subset of packets by integer index array or boolean mask (order preserved)."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return FlowTrace(self.ts_us[idx], self.size[idx], self.dir[idx], self.is_dummy[idx],
                         [self.headers[i] for i in idx], [self.payloads[i] for i in idx],
                         flow_id=self.flow_id, label=self.label)

    def with_times(self, ts_us) -> "FlowTrace":
        return FlowTrace(ts_us, self.size, self.dir, self.is_dummy, self.headers, self.payloads,
                         flow_id=self.flow_id, label=self.label)

    def relabel(self, flow_id=None, label=None) -> "FlowTrace":
        return FlowTrace(self.ts_us, self.size, self.dir, self.is_dummy, self.headers,
                         self.payloads, flow_id=self.flow_id if flow_id is None else flow_id,
                         label=self.label if label is None else label)

    def head(self, n: int) -> "FlowTrace":
        return self.take(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# trace files: one metadata line then one JSON object per packet

def flow_to_jsonl(flow: FlowTrace) -> str:
    lines = [json.dumps({"flow_id": flow.flow_id, "label": flow.label})]
    for t, s, d, h, p, x in zip(flow.ts_us, flow.size, flow.dir, flow.headers, flow.payloads,
                                flow.is_dummy):
        lines.append(json.dumps({"ts_us": int(t), "size": int(s), "dir": int(d), "hdr": h.hex(),
                                 "pay": p.hex(), "dummy": bool(x)}))
    return "\n".join(lines) + "\n"


def flow_from_jsonl(text: str) -> FlowTrace:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError("empty trace file")
    meta = json.loads(lines[0])
    if "flow_id" not in meta or "label" not in meta:
        raise ValidationError("first line must carry flow_id and label")
    recs = [json.loads(ln) for ln in lines[1:]]
    return FlowTrace([r["ts_us"] for r in recs], [r["size"] for r in recs],
                     [r["dir"] for r in recs], [r.get("dummy", False) for r in recs],
                     [bytes.fromhex(r.get("hdr", "")) for r in recs],
                     [bytes.fromhex(r.get("pay", "")) for r in recs],
                     flow_id=str(meta["flow_id"]), label=int(meta["label"]))


def write_flow(flow: FlowTrace, path) -> None:
    Path(path).write_text(flow_to_jsonl(flow))


def read_flow(path) -> FlowTrace:
    return flow_from_jsonl(Path(path).read_text())


# ---------------------------------------------------------------------------
# header synthesis at the observation point

def stamp_headers(flow: FlowTrace, seed: int, payload_bytes: int = 16,
                  tsval_hz: int = 1000, random_clock_offset: bool = False) -> FlowTrace:
    """Attach IPv4/TCP headers and an encrypted-payload prefix to every packet.

    Headers are what a capture at the exit would record for this connection:
    IPv4 (DF, TTL 64) followed by TCP with the timestamp option. TSval is the
    sender's millisecond clock at the observed packet time, so packet timing
    reaches the byte representation the same way it does on a real Linux
    TCP connection. Payload prefixes are uniform random bytes.
    """
    rng = np.random.default_rng(seed)
    n = len(flow)
    src, dst = rng.integers(0, 2**32, size=2, dtype=np.uint64)
    sport = int(rng.integers(1024, 65536))
    dport = int(rng.choice([443, 9001, 9030]))
    ip_id = int(rng.integers(0, 2**16))
    seq = int(rng.integers(0, 2**32))
    ack = int(rng.integers(0, 2**32))
    clock0 = int(rng.integers(0, 2**32)) if random_clock_offset else 0
    rtt_ms = int(rng.integers(20, 200))
    window = int(rng.integers(200, 2048))
    headers, payloads = [], []
    for i in range(n):
        size = int(flow.size[i])
        plen = max(size - IPV4_TCP_TS_HEADER_LEN, 0)
        tsval = (clock0 + int(flow.ts_us[i]) * tsval_hz // 1_000_000) % 2**32
        tsecr = (clock0 + max(int(flow.ts_us[i]) // 1000 - rtt_ms, 0)) % 2**32
        ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, min(size, 0xFFFF), (ip_id + i) % 2**16,
                         0x4000, 64, 6, 0, int(src).to_bytes(4, "big"),
                         int(dst).to_bytes(4, "big"))
        ip = ip[:10] + _inet_checksum(ip).to_bytes(2, "big") + ip[12:]
        flags = 0x18 if plen else 0x10
        tcp = struct.pack("!HHIIBBHHH", sport, dport, seq, ack, 8 << 4, flags, window, 0, 0)
        tcp += struct.pack("!BBBBII", 1, 1, 8, 10, tsval, tsecr)
        seq = (seq + plen) % 2**32
        hdr = ip + tcp
        pay = rng.integers(0, 256, size=min(payload_bytes, plen), dtype=np.uint8).tobytes()
        headers.append(hdr[:size])
        payloads.append(pay)
    return FlowTrace(flow.ts_us, np.maximum(flow.size, IPV4_TCP_TS_HEADER_LEN), flow.dir,
                     flow.is_dummy, headers, payloads, flow_id=flow.flow_id, label=flow.label)


def _inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def anonymize_header(header: bytes) -> bytes:
    """Zero addresses, ports and address-derived checksums of an IPv4/TCP header.

    Anything that does not look like an IPv4 header with a TCP segment is
    returned unchanged.
    """
    if len(header) < 20 or header[0] >> 4 != 4 or header[9] != 6:
        return header
    b = bytearray(header)
    for lo, hi in _ANON_RANGES:
        b[lo:min(hi, len(b))] = bytes(max(0, min(hi, len(b)) - lo))
    return bytes(b)


# ---------------------------------------------------------------------------
# bit serialization and strides

@dataclass
class SerializedFlow:
    bits: np.ndarray
    M: int
    H: int
    P: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or len(self.bits) != self.M * (self.H + self.P) * 8:
            raise ValidationError("bits length must be M*(H+P)*8")

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, M: int, H: int, P: int) -> "SerializedFlow":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: M * (H + P) * 8]
        return cls(bits, M, H, P)


@dataclass
class StrideSequence:
    strides: np.ndarray
    L_s: int
    length: int = field(default=-1)

    def __post_init__(self):
        self.strides = np.asarray(self.strides, dtype=np.uint8)
        if self.strides.ndim != 2 or self.strides.shape[1] != self.L_s:
            raise ValidationError("strides must be N x L_s")
        if self.length < 0:
            self.length = self.strides.size

    @property
    def N(self) -> int:
        return self.strides.shape[0]


def _fit(b: bytes, n: int) -> bytes:
    return b[:n] + bytes(max(0, n - len(b)))


def serialize_flow(flow: FlowTrace, M: int = 64, H: int = 52, P: int = 12,
                   anonymize: bool = True) -> SerializedFlow:
    """Fixed-length MSB-first bit image of the first ``M`` packets.

    Timestamps never enter the representation, only header and payload bytes.
    """
    if M <= 0 or H < 0 or P < 0 or H + P <= 0:
        raise ValidationError("M must be > 0 and H + P > 0")
    buf = bytearray()
    for i in range(min(M, len(flow))):
        h = flow.headers[i]
        if anonymize:
            h = anonymize_header(h)
        buf += _fit(h, H) + _fit(flow.payloads[i], P)
    buf += bytes(M * (H + P) - len(buf))
    bits = np.unpackbits(np.frombuffer(bytes(buf), dtype=np.uint8))
    return SerializedFlow(bits, M, H, P)


def segment_strides(s: SerializedFlow | np.ndarray, L_s: int = 512) -> StrideSequence:
    bits = s.bits if isinstance(s, SerializedFlow) else np.asarray(s, dtype=np.uint8)
    if L_s <= 0:
        raise ValidationError("L_s must be > 0")
    n = len(bits)
    N = math.ceil(n / L_s)
    padded = np.zeros(N * L_s, dtype=np.uint8)
    padded[:n] = bits
    return StrideSequence(padded.reshape(N, L_s), L_s, n)


def unsegment(seq: StrideSequence) -> np.ndarray:
    return seq.strides.reshape(-1)[: seq.length].copy()


def flows_to_strides(flows: Iterable[FlowTrace], M=64, H=52, P=12, L_s=512,
                     anonymize=True) -> np.ndarray:
    """Stack the stride matrices of many flows into an array of shape (n, N, L_s)."""
    return np.stack([segment_strides(serialize_flow(f, M, H, P, anonymize), L_s).strides
                     for f in flows])


# ---------------------------------------------------------------------------
# timing statistics

def throughput_bins(flow: FlowTrace, bin: float = 1.0, include_dummy: bool = True) -> np.ndarray:
    """Bytes per second in consecutive bins ``[i*bin, (i+1)*bin)`` up to the last packet."""
    if bin <= 0:
        raise ValidationError("bin must be > 0")
    mask = np.ones(len(flow), bool) if include_dummy else ~flow.is_dummy
    ts = flow.ts[mask]
    if len(ts) == 0:
        return np.zeros(0)
    idx = np.floor(ts / bin).astype(np.int64)
    sums = np.bincount(idx, weights=flow.size[mask].astype(float), minlength=idx[-1] + 1)
    return sums / bin


def rolling_iat(flow: FlowTrace, window: int = 10) -> np.ndarray:
    """Moving mean (in seconds) over ``window`` consecutive inter-arrival gaps."""
    if window < 1:
        raise ValidationError("window must be >= 1")
    if len(flow) < 2:
        return np.zeros(0)
    gaps = np.diff(flow.ts_us) / 1e6
    if len(gaps) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(gaps)])
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------------------
# serialized dataset: per-flow packed bits plus a manifest

def write_serialized_dataset(flows: Sequence[FlowTrace], out_dir, M=64, H=52, P=12) -> dict:
    out = Path(out_dir)
    (out / "bits").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in flows:
        data = serialize_flow(f, M, H, P).to_bytes()
        (out / "bits" / f"{f.flow_id}.bin").write_bytes(data)
        entries.append({"flow_id": f.flow_id, "label": f.label, "bytes": len(data)})
    manifest = {"M": M, "H": H, "P": P, "flows": entries}
    (out / "bits_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_serialized_dataset(out_dir) -> Iterator[tuple[str, int, SerializedFlow]]:
    out = Path(out_dir)
    manifest = json.loads((out / "bits_manifest.json").read_text())
    M, H, P = manifest["M"], manifest["H"], manifest["P"]
    for e in manifest["flows"]:
        data = (out / "bits" / f"{e['flow_id']}.bin").read_bytes()
        if len(data) != e["bytes"]:
            raise ValidationError(f"{e['flow_id']}: byte length mismatch")
        yield e["flow_id"], e["label"], SerializedFlow.from_bytes(data, M, H, P)
