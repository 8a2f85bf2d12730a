"""
Longitudinal bicycle dynamics.

Continuous form: m_t dv/dt = P/v - m_t g (sin th + mu cos th) - 0.5 CdA rho v^2
Discrete form: the rider power needed to go from v_i to v_next over one
distance step, evaluated at the mean velocity of the step.
Drivetrain losses are not modelled; lab mode drops aerodynamic drag.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from errors import InputError
from utils import PathLike, load_json_document

logger = logging.getLogger(__name__)

MAX_SUBSTEP_S = 0.05

PHYSICS_KEYS = {
    "m_t": "mass_kg",
    "g": "g",
    "mu": "crr",
    "cd_a": "cda_m2",
    "rho": "rho_kgm3",
    "lab_mode": "lab_mode",
}


@dataclass(frozen=True)
class PhysicsParams:
    m_t: float
    g: float = 9.81
    mu: float = 0.004
    cd_a: float = 0.25
    rho: float = 1.225
    lab_mode: bool = False

    def __post_init__(self):
        if not self.m_t > 0:
            raise ValueError(f"total mass must be > 0, got {self.m_t}")
        if self.mu < 0:
            raise ValueError(f"rolling resistance must be >= 0, got {self.mu}")
        if self.cd_a < 0:
            raise ValueError(f"drag area must be >= 0, got {self.cd_a}")
        if not self.rho > 0:
            raise ValueError(f"air density must be > 0, got {self.rho}")

    @property
    def effective_cd_a(self) -> float:
        return 0.0 if self.lab_mode else self.cd_a

    def to_document(self) -> Dict[str, Any]:
        doc = {key: float(getattr(self, name)) for name, key in PHYSICS_KEYS.items()}
        doc["lab_mode"] = bool(self.lab_mode)
        return doc

    @classmethod
    def from_document(cls, doc: Dict[str, Any], source: str = "rider document") -> "PhysicsParams":
        if "mass_kg" not in doc:
            raise InputError("missing key 'mass_kg'", source=source)
        kwargs = {}
        for name, key in PHYSICS_KEYS.items():
            if key not in doc:
                continue
            value = doc[key]
            if name == "lab_mode":
                if not isinstance(value, bool):
                    raise InputError(f"key 'lab_mode' must be true or false, got {value!r}", source=source)
                kwargs[name] = value
                continue
            try:
                kwargs[name] = float(value)
            except (TypeError, ValueError):
                raise InputError(f"key '{key}' is not a number: {value!r}", source=source)
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise InputError(str(e), source=source)


def load_physics_params(path: PathLike, lab_mode: Optional[bool] = None) -> PhysicsParams:
    """Physics block of the rider document; `lab_mode` overrides the file when given"""
    doc = load_json_document(path)
    if lab_mode is not None:
        doc = dict(doc, lab_mode=lab_mode)
    prm = PhysicsParams.from_document(doc, source=str(path))
    if prm.lab_mode:
        logger.info("Lab mode: aerodynamic drag removed")
    return prm


def resistive_force(v, theta, prm: PhysicsParams):
    """Gravity, rolling and drag force at velocity v (N)"""
    v = np.asarray(v, dtype=float)
    return prm.m_t * prm.g * (np.sin(theta) + prm.mu * np.cos(theta)) + 0.5 * prm.effective_cd_a * prm.rho * v * v


def resistive_power(v, theta, prm: PhysicsParams):
    return resistive_force(v, theta, prm) * np.asarray(v, dtype=float)


def required_power(v_i, v_next, theta, prm: PhysicsParams, dx: float):
    """Power to go from v_i to v_next over dx at the step's mean velocity. Broadcasts."""
    v_i = np.asarray(v_i, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    if dx <= 0:
        raise ValueError(f"dx must be > 0, got {dx}")
    if np.any(v_i <= 0) or np.any(v_next <= 0):
        raise ValueError("velocities must be > 0")

    v_bar = (v_next + v_i) / 2
    kinetic = prm.m_t * (v_next * v_next - v_i * v_i) / (2 * dx)
    grade = prm.m_t * prm.g * (np.sin(theta) + prm.mu * np.cos(theta))
    drag = 0.5 * prm.effective_cd_a * prm.rho * v_bar * v_bar
    p = (kinetic + grade + drag) * v_bar
    return p if p.ndim else float(p)


def _dv_dt(v: float, p: float, theta: float, prm: PhysicsParams) -> float:
    return (p - float(resistive_power(v, theta, prm))) / (prm.m_t * v)


def accelerate(
    v: float,
    p: float,
    theta: float,
    prm: PhysicsParams,
    dt: float,
    v_min: float = 0.5,
    v_max: Optional[float] = None,
    max_substep: float = MAX_SUBSTEP_S,
) -> float:
    """Integrate the continuous dynamics for dt seconds under constant power.

    Classic RK4 on equal sub-steps no longer than `max_substep`. Speed is
    floored at v_min and, when v_max is given, capped there (braking).
    """
    if v <= 0:
        raise ValueError(f"velocity must be > 0, got {v}")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")

    n = max(1, math.ceil(dt / max_substep - 1e-12))
    h = dt / n
    for _ in range(n):
        k1 = _dv_dt(v, p, theta, prm)
        k2 = _dv_dt(max(v + 0.5 * h * k1, v_min), p, theta, prm)
        k3 = _dv_dt(max(v + 0.5 * h * k2, v_min), p, theta, prm)
        k4 = _dv_dt(max(v + h * k3, v_min), p, theta, prm)
        v = v + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        v = max(v, v_min)
        if v_max is not None:
            v = min(v, v_max)
    return v
