"""Scaled-network Monte-Carlo of bandwidth-weighted exit selection.

Only the exit hop is sampled: the chance of landing on an adversarial exit
depends on exit weights alone. Exit-Guard relays count as exits with their
full weight.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corrmodel import exit_probability
from .waveform import ValidationError

GUARD = "Guard"
EXIT = "Exit"
ADV_BW_RANGE = (27.0, 148.0)
# fraction of circuits on a single 148 Mbps adversarial exit in the reference run
ANCHOR_P_EXIT = 0.0213
ANCHOR_ADV_BW = 148.0


@dataclass(frozen=True)
class Relay:
    id: str
    bandwidth: float
    flags: frozenset = frozenset()
    adversarial: bool = False

    def __post_init__(self):
        object.__setattr__(self, "flags", frozenset(self.flags))
        if not self.bandwidth >= 0:
            raise ValidationError("bandwidth must be >= 0")

    @property
    def is_exit(self) -> bool:
        return EXIT in self.flags

    def to_dict(self):
        return {"id": self.id, "bandwidth": self.bandwidth, "flags": sorted(self.flags),
                "adversarial": self.adversarial}


@dataclass(frozen=True)
class ScaledNetwork:
    relays: tuple
    scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "relays", tuple(self.relays))
        if not any(r.is_exit for r in self.relays):
            raise ValidationError("network has no exit-capable relay")

    @property
    def exits(self) -> list:
        return [r for r in self.relays if r.is_exit]

    def exit_weights(self) -> tuple[np.ndarray, np.ndarray]:
        ex = self.exits
        return (np.array([r.bandwidth for r in ex], float),
                np.array([r.adversarial for r in ex], bool))

    def analytic_p_exit(self) -> float:
        w, bad = self.exit_weights()
        return exit_probability(w, np.flatnonzero(bad))

    def to_dict(self):
        return {"scale": self.scale, "relays": [r.to_dict() for r in self.relays]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Relay(r["id"], float(r["bandwidth"]), frozenset(r.get("flags", ())),
                               bool(r.get("adversarial", False))) for r in d["relays"]),
                   float(d.get("scale", 0.01)))


@dataclass(frozen=True)
class NetworkSpec:
    """Composition and bandwidth model of a scaled network.

    Benign exit bandwidths follow a log-uniform law on ``exit_bw_range``
    (Mbps), placed at its mid-quantiles unless ``random_exit_bw`` is set. When
    ``calibrate_anchor`` is set they are rescaled so that replacing the
    smallest exit by one ``anchor_bw`` adversary gives exactly
    ``anchor_p_exit``.
    """

    n_relays: int = 80
    n_exit_guard: int = 14
    n_exit: int = 9
    n_guard: int = 30
    exit_bw_range: tuple = (20.0, 900.0)
    other_bw_range: tuple = (5.0, 400.0)
    calibrate_anchor: bool = True
    random_exit_bw: bool = False
    anchor_p_exit: float = ANCHOR_P_EXIT
    anchor_bw: float = ANCHOR_ADV_BW
    scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_relays, self.n_exit_guard, self.n_exit, self.n_guard)
        if min(counts) < 0:
            raise ValidationError("relay counts must be >= 0")
        if self.n_exit_guard + self.n_exit + self.n_guard > self.n_relays:
            raise ValidationError("role counts exceed n_relays")
        if self.n_exit_guard + self.n_exit == 0:
            raise ValidationError("zero exits")
        object.__setattr__(self, "exit_bw_range", tuple(self.exit_bw_range))
        object.__setattr__(self, "other_bw_range", tuple(self.other_bw_range))

    def to_dict(self):
        d = asdict(self)
        d["exit_bw_range"] = list(self.exit_bw_range)
        d["other_bw_range"] = list(self.other_bw_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "paper-vi-a": NetworkSpec(),
}


def _log_uniform(rng, lo, hi, n):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))


def build_scaled_network(spec: NetworkSpec | str = "paper-vi-a") -> ScaledNetwork:
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ValidationError(f"unknown network preset {spec!r}")
        spec = PRESETS[spec]
    rng = np.random.default_rng(spec.seed)
    n_ex = spec.n_exit_guard + spec.n_exit
    if spec.random_exit_bw:
        exit_bw = _log_uniform(rng, *spec.exit_bw_range, n_ex)
    else:
        lo, hi = map(math.log, spec.exit_bw_range)
        exit_bw = np.exp(lo + (np.arange(n_ex) + 0.5) / n_ex * (hi - lo))
        # interleave so both exit roles get a spread of sizes
        exit_bw = exit_bw[rng.permutation(n_ex)]
    if spec.calibrate_anchor and n_ex >= 2:
        target_rest = spec.anchor_bw * (1.0 - spec.anchor_p_exit) / spec.anchor_p_exit
        rest = exit_bw.sum() - exit_bw.min()
        exit_bw *= target_rest / rest
    other_bw = _log_uniform(rng, *spec.other_bw_range, spec.n_relays - n_ex)
    relays = []
    for i in range(spec.n_exit_guard):
        relays.append(Relay(f"exitguard{i:02d}", float(exit_bw[i]), frozenset({EXIT, GUARD})))
    for i in range(spec.n_exit):
        relays.append(Relay(f"exit{i:02d}", float(exit_bw[spec.n_exit_guard + i]), frozenset({EXIT})))
    for i in range(spec.n_guard):
        relays.append(Relay(f"guard{i:02d}", float(other_bw[i]), frozenset({GUARD})))
    for i in range(spec.n_relays - n_ex - spec.n_guard):
        relays.append(Relay(f"middle{i:02d}", float(other_bw[spec.n_guard + i]), frozenset()))
    return ScaledNetwork(tuple(relays), spec.scale)


def inject_adversary(net: ScaledNetwork, n: int, bandwidths, enforce_range: bool = True) -> ScaledNetwork:
    """Replace the ``n`` lowest-bandwidth benign exits by adversarial exits.

    Ties in bandwidth are broken by relay id. Each adversary keeps the
    flags of the relay it replaces.
    """
    bandwidths = [float(b) for b in np.atleast_1d(bandwidths)] if n else []
    if len(bandwidths) == 1 and n > 1:
        bandwidths = bandwidths * n
    if len(bandwidths) != n:
        raise ValidationError("need one bandwidth per adversarial relay")
    lo, hi = ADV_BW_RANGE
    if enforce_range and any(not lo <= b <= hi for b in bandwidths):
        raise ValidationError(f"adversarial bandwidth outside [{lo}, {hi}] Mbps")
    benign = sorted((r for r in net.exits if not r.adversarial), key=lambda r: (r.bandwidth, r.id))
    if n > len(benign):
        raise ValidationError(f"n={n} exceeds the {len(benign)} benign exits")
    victims = {r.id: k for k, r in enumerate(benign[:n])}
    adv_count = sum(r.adversarial for r in net.relays)
    relays = []
    for r in net.relays:
        if r.id in victims:
            k = victims[r.id]
            relays.append(Relay(f"adv{adv_count + k:02d}", bandwidths[k], r.flags, True))
        else:
            relays.append(r)
    return ScaledNetwork(tuple(relays), net.scale)


def _exit_table(net: ScaledNetwork):
    ex = net.exits
    w = np.array([r.bandwidth for r in ex], float)
    total = w.sum()
    if total <= 0:
        raise ValidationError("zero total exit bandwidth")
    return ex, w / total


def sample_exit(net: ScaledNetwork, rng: np.random.Generator) -> str:
    """One bandwidth-weighted exit choice; returns the relay id."""
    ex, p = _exit_table(net)
    return ex[int(rng.choice(len(ex), p=p))].id


def sample_exits(net: ScaledNetwork, rng: np.random.Generator, trials: int) -> np.ndarray:
    """Indices into ``net.exits`` for ``trials`` independent circuits."""
    ex, p = _exit_table(net)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(trials), side="right")


def estimate_p_exit(net: ScaledNetwork, trials: int = 14_900, seed: int = 0) -> tuple[float, float]:
    """Empirical fraction of circuits whose exit is adversarial, with its binomial stderr."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    bad = np.array([r.adversarial for r in net.exits], bool)
    hits = int(bad[sample_exits(net, rng, trials)].sum())
    p_hat = hits / trials
    return p_hat, math.sqrt(p_hat * (1.0 - p_hat) / trials)


def sweep(net: ScaledNetwork, n_values=range(10), adv_bandwidth=ANCHOR_ADV_BW,
          trials: int = 14_900, seed: int = 0, enforce_range: bool = True) -> list[dict]:
    """p_exit estimates as benign exits are progressively replaced."""
    rows = []
    for n in sorted(n_values):
        bws = adv_bandwidth if np.ndim(adv_bandwidth) == 0 else list(adv_bandwidth)[:n]
        g = inject_adversary(net, n, [bws] * n if np.ndim(bws) == 0 else bws, enforce_range)
        p_hat, se = estimate_p_exit(g, trials, seed=_sub_seed(seed, n))
        rows.append({"n": n, "adv_bw_total": sum(r.bandwidth for r in g.relays if r.adversarial),
                     "p_hat": p_hat, "stderr": se, "p_analytic": g.analytic_p_exit()})
    return rows


def _sub_seed(seed: int, n: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{n}".encode()).digest()[:8], "little")
