"""Modulation dictionary and the bounded shaping-rate law.

All rates are bytes per second and all times are seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum

import numpy as np

DEFAULT_PERIOD = 30.0


class ValidationError(ValueError):
    """Raised when a configuration object violates its invariants."""


class WaveKind(str, Enum):
    NATURAL = "Natural"
    SINE = "Sine"
    SQUARE = "Square"
    TRIANGLE = "Triangle"


# class id in the modulation dictionary: m0 natural, m1 sine, m2 square, m3 triangle
CLASS_OF_KIND = {
    WaveKind.NATURAL: 0,
    WaveKind.SINE: 1,
    WaveKind.SQUARE: 2,
    WaveKind.TRIANGLE: 3,
}
KIND_OF_CLASS = {v: k for k, v in CLASS_OF_KIND.items()}


@dataclass(frozen=True)
class ModulationSpec:
    kind: WaveKind = WaveKind.NATURAL
    r_base: float = 0.0
    amplitude_A: float = 0.0
    f_mod: float = 1.0 / DEFAULT_PERIOD
    phase_phi: float = 0.0
    r_high: float = 0.0
    r_low: float = 0.0
    r_min: float = 1.0
    r_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "kind", WaveKind(self.kind))
        self.validate()

    def validate(self):
        if not math.isfinite(self.r_min) or self.r_min <= 0:
            raise ValidationError("r_min must be finite and > 0")
        if not self.r_max >= self.r_min:
            raise ValidationError("r_max must be >= r_min")
        if self.kind is WaveKind.NATURAL:
            return
        if not self.amplitude_A >= 0:
            raise ValidationError("amplitude_A must be >= 0")
        if not (math.isfinite(self.f_mod) and self.f_mod > 0):
            raise ValidationError("f_mod must be > 0")
        if not self.r_low <= self.r_high:
            raise ValidationError("r_low must be <= r_high")
        if not math.isfinite(self.phase_phi):
            raise ValidationError("phase_phi must be finite")

    @property
    def period(self) -> float:
        return 1.0 / self.f_mod

    @property
    def class_id(self) -> int:
        return CLASS_OF_KIND[self.kind]

    @classmethod
    def natural(cls, r_max: float = math.inf) -> "ModulationSpec":
        return cls(kind=WaveKind.NATURAL, r_max=r_max)

    @classmethod
    def sine(cls, r_base, amplitude_A=None, f_mod=1.0 / DEFAULT_PERIOD, phase_phi=0.0,
             r_min=None, r_max=None) -> "ModulationSpec":
        A = 0.4 * r_base if amplitude_A is None else amplitude_A
        return cls(kind=WaveKind.SINE, r_base=r_base, amplitude_A=A, f_mod=f_mod,
                   phase_phi=phase_phi,
                   r_min=r_min if r_min is not None else max(r_base - A, 1.0),
                   r_max=r_max if r_max is not None else r_base + A)

    @classmethod
    def triangle(cls, r_base, amplitude_A=None, f_mod=1.0 / DEFAULT_PERIOD, phase_phi=0.0,
                 r_min=None, r_max=None) -> "ModulationSpec":
        A = 0.4 * r_base if amplitude_A is None else amplitude_A
        return cls(kind=WaveKind.TRIANGLE, r_base=r_base, amplitude_A=A, f_mod=f_mod,
                   phase_phi=phase_phi,
                   r_min=r_min if r_min is not None else max(r_base - A, 1.0),
                   r_max=r_max if r_max is not None else r_base + A)

    @classmethod
    def square(cls, r_high, r_low, f_mod=1.0 / DEFAULT_PERIOD, r_min=None,
               r_max=None) -> "ModulationSpec":
        return cls(kind=WaveKind.SQUARE, r_high=r_high, r_low=r_low, f_mod=f_mod,
                   r_min=r_min if r_min is not None else max(r_low, 1.0),
                   r_max=r_max if r_max is not None else r_high)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        if math.isinf(d["r_max"]):
            d["r_max"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModulationSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown ModulationSpec keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("r_max", 0) is None:
            d["r_max"] = math.inf
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModulationSpec":
        return cls.from_dict(json.loads(text))

    def with_(self, **changes) -> "ModulationSpec":
        return replace(self, **changes)


def eval_target(spec: ModulationSpec, t):
    """Unbounded target rate of ``spec`` at time(s) ``t``.

    Accepts a scalar or an array of times and returns the same shape.
    Natural traffic has no target, so it evaluates to ``r_max``.
    """
    if isinstance(t, (int, float)):
        return _target_scalar(spec, float(t))
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValidationError("t must be >= 0")
    w = 2.0 * np.pi * spec.f_mod * t_arr
    kind = spec.kind
    if kind is WaveKind.NATURAL:
        out = np.full_like(t_arr, spec.r_max)
    elif kind is WaveKind.SINE:
        out = spec.r_base + spec.amplitude_A * np.sin(w + spec.phase_phi)
    elif kind is WaveKind.SQUARE:
        # sin == 0 belongs to the high state
        out = np.where(np.sin(w) >= 0, spec.r_high, spec.r_low)
    elif kind is WaveKind.TRIANGLE:
        s = np.clip(np.sin(w + spec.phase_phi), -1.0, 1.0)
        out = spec.r_base + (2.0 * spec.amplitude_A / np.pi) * np.arcsin(s)
    else:  # pragma: no cover
        raise ValidationError(f"unknown kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def _target_scalar(spec: ModulationSpec, t: float) -> float:
    if t < 0:
        raise ValidationError("t must be >= 0")
    kind = spec.kind
    if kind is WaveKind.NATURAL:
        return spec.r_max
    w = 2.0 * math.pi * spec.f_mod * t
    if kind is WaveKind.SINE:
        return spec.r_base + spec.amplitude_A * math.sin(w + spec.phase_phi)
    if kind is WaveKind.SQUARE:
        return spec.r_high if math.sin(w) >= 0 else spec.r_low
    s = min(max(math.sin(w + spec.phase_phi), -1.0), 1.0)
    return spec.r_base + (2.0 * spec.amplitude_A / math.pi) * math.asin(s)


def eval_bounded(spec: ModulationSpec, t):
    """Target rate clamped to ``[r_min, r_max]``."""
    if isinstance(t, (int, float)):
        return min(max(_target_scalar(spec, float(t)), spec.r_min), spec.r_max)
    return np.clip(eval_target(spec, t), spec.r_min, spec.r_max)


def mean_bounded_rate(spec: ModulationSpec, t0: float, t1: float, n: int = 20001) -> float:
    """Time-average of the bounded rate over ``[t0, t1]`` by composite Simpson quadrature."""
    from scipy.integrate import simpson

    if n % 2 == 0:
        n += 1
    ts = np.linspace(t0, t1, n)
    return float(simpson(eval_bounded(spec, ts), x=ts) / (t1 - t0))
