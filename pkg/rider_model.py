"""
Rider physiology: critical power, anaerobic work capacity, the switching
fatigue/recovery energy model and the maximum-power curve.
All quantities are SI (W, J, s, m/s).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from errors import InputError
from utils import PathLike, load_json_document

logger = logging.getLogger(__name__)

RIDER_KEYS = {
    "cp": "cp_w",
    "awc": "awc_j",
    "rec_a": "rec_a",
    "rec_b": "rec_b",
    "mp_a1": "mp_a1",
    "mp_a2": "mp_a2",
    "vmax": "vmax_mps",
}


@dataclass(frozen=True)
class RiderModel:
    cp: float
    awc: float
    rec_a: float
    rec_b: float
    mp_a1: float
    mp_a2: float
    vmax: float = 16.0

    def __post_init__(self):
        for name in RIDER_KEYS:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.cp <= 0:
            raise ValueError(f"cp must be positive, got {self.cp}")
        if self.awc <= 0:
            raise ValueError(f"awc must be positive, got {self.awc}")
        if self.vmax <= 0:
            raise ValueError(f"vmax must be positive, got {self.vmax}")
        low = self.min_power_reserve()
        if low < -1e-9 * self.cp:
            raise ValueError(
                f"max power curve drops below cp on [0, awc] (min reserve {low:.6g} W); "
                f"mp_a1={self.mp_a1}, mp_a2={self.mp_a2}"
            )

    def min_power_reserve(self) -> float:
        """Smallest value of max_power(w) - cp over w in [0, awc]"""
        # the reserve is a quadratic through the origin, so its minimum on the
        # interval sits at an end point or at the vertex
        candidates = [0.0, self.awc]
        if self.mp_a1 != 0.0:
            vertex = -self.mp_a2 / (2.0 * self.mp_a1)
            if 0.0 < vertex < self.awc:
                candidates.append(vertex)
        w = np.asarray(candidates)
        return float(np.min(self.mp_a1 * w * w + self.mp_a2 * w))

    def max_power_is_monotone(self) -> bool:
        """True when max_power is non-decreasing on [0, awc]"""
        return self.mp_a2 >= 0.0 and self.mp_a2 + 2.0 * self.mp_a1 * self.awc >= 0.0

    def to_document(self) -> Dict[str, float]:
        return {key: float(getattr(self, name)) for name, key in RIDER_KEYS.items()}

    @classmethod
    def from_document(cls, doc: Dict[str, Any], source: str = "rider document") -> "RiderModel":
        kwargs = {}
        for name, key in RIDER_KEYS.items():
            if key not in doc:
                if name == "vmax":
                    continue
                raise InputError(f"missing key '{key}'", source=source)
            try:
                kwargs[name] = float(doc[key])
            except (TypeError, ValueError):
                raise InputError(f"key '{key}' is not a number: {doc[key]!r}", source=source)
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise InputError(str(e), source=source)


@dataclass(frozen=True)
class EnergyState:
    w: float

    @classmethod
    def full(cls, m: RiderModel) -> "EnergyState":
        return cls(m.awc)

    def validate(self, m: RiderModel) -> "EnergyState":
        if not 0.0 <= self.w <= m.awc:
            raise ValueError(f"remaining energy {self.w} outside [0, {m.awc}]")
        return self


def load_rider_model(path: PathLike) -> RiderModel:
    doc = load_json_document(path)
    model = RiderModel.from_document(doc, source=str(path))
    logger.debug("Loaded rider model from %s: %s", path, model)
    return model


def fatigue_rate(p, m: RiderModel):
    """dW/dt above CP, -(p - cp). Accepts arrays."""
    return -(np.asarray(p, dtype=float) - m.cp)


def recovery_rate(p, m: RiderModel):
    """dW/dt below CP through the adjusted recovery power a*p + b. Accepts arrays.

    Not clamped: a recovery line above CP gives a negative rate.
    """
    return m.cp - (m.rec_a * np.asarray(p, dtype=float) + m.rec_b)


def dw_fatigue(p: float, dt: float, m: RiderModel) -> float:
    """Energy change above CP: -(p - cp) * dt"""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if p < m.cp:
        raise ValueError(f"fatigue branch needs p >= cp ({m.cp} W), got {p}")
    return float(fatigue_rate(p, m)) * dt


def dw_recovery(p: float, dt: float, m: RiderModel) -> float:
    """Energy change below CP over dt seconds"""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if p >= m.cp:
        raise ValueError(f"recovery branch needs p < cp ({m.cp} W), got {p}")
    return float(recovery_rate(p, m)) * dt


def energy_rate(p, m: RiderModel):
    """dW/dt of the switching model; zero at p == cp. Accepts arrays."""
    p = np.asarray(p, dtype=float)
    rate = np.where(p > m.cp, fatigue_rate(p, m), np.where(p == m.cp, 0.0, recovery_rate(p, m)))
    return rate if rate.ndim else float(rate)


def max_power(w: float, m: RiderModel) -> float:
    if not 0.0 <= w <= m.awc:
        raise ValueError(f"remaining energy {w} outside [0, {m.awc}]")
    return m.mp_a1 * w * w + m.mp_a2 * w + m.cp


def time_to_exhaustion(p: float, m: RiderModel) -> float:
    """Constant-power time to empty a full tank, awc / (p - cp)"""
    if p <= m.cp:
        raise ValueError(f"time to exhaustion is unbounded for p <= cp ({m.cp} W), got {p}")
    return m.awc / (p - m.cp)
