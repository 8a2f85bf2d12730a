from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import pytest

from course import CourseProfile, load_profile
from dp_solver import PacingPlan, SolverConfig, ValueTables, extract_plan, solve_backward
from model_fitting import IntervalTestRecord, PowerTrace, fit_max_power_curve, fit_recovery_line, recovery_points
from physics import PhysicsParams
from rider_model import RiderModel

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# +6% for 3 km, -2% for 1 km, +5% for 3 km, flat elsewhere; 10.3 km
TWO_CLIMB_POINTS = [(0, 0), (1000, 0), (4000, 180), (5000, 160), (8000, 310), (10300, 310)]

SUB9_CP, SUB9_AWC = 234.0, 9758.0


def constant_trace(power, seconds, start=0.0) -> PowerTrace:
    t = start + np.arange(float(seconds))
    return PowerTrace(t, np.full(t.size, float(power)))


def synthetic_all_out(cp, awc, a1, a2, rate_hz=10.0, seconds=180.0) -> PowerTrace:
    """Trace whose cumulative-trapezoid energy obeys p - cp = a1 W^2 + a2 W exactly"""
    h = 1.0 / rate_hz
    n = int(round(seconds * rate_hz))
    half = h / 2
    b = 1 + half * a2
    w = np.empty(n)
    w[0] = awc
    for k in range(n - 1):
        c = w[k] - half * (a1 * w[k] ** 2 + a2 * w[k])
        w[k + 1] = 2 * c / (b + np.sqrt(b * b + 4 * half * a1 * c))
    t = np.arange(n) * h
    return PowerTrace(t, cp + a1 * w * w + a2 * w, source="synthetic")


def interval_record(e1, e2, cp=SUB9_CP, recovery_power=100.0, duration=120.0) -> IntervalTestRecord:
    """Fatigue and final segments whose areas above cp are e1 and e2 (1 Hz, 100 s)"""
    fatigue = constant_trace(cp + e1 / 100.0, 100)
    final = constant_trace(cp + e2 / 100.0, 100)
    return IntervalTestRecord(fatigue, recovery_power, duration, final)


def linear_recovery_record(cp, awc, rec_a, rec_b, recovery_power, duration) -> IntervalTestRecord:
    """Interval test of a rider who recovers at cp - (rec_a * p + rec_b) watts"""
    recovered = (cp - (rec_a * recovery_power + rec_b)) * duration
    return interval_record(awc / 2, awc / 2 + recovered, cp, recovery_power, duration)


def fitted_sub9() -> RiderModel:
    """Sub 9 rider with the recovery line and max-power curve fitted from synthetic tests"""
    records = [
        linear_recovery_record(SUB9_CP, SUB9_AWC, 0.8, 40.0, power, duration)
        for power in (80.0, 150.0, 190.0)
        for duration in (120.0, 360.0)
    ]
    rec_a, rec_b, _ = fit_recovery_line(recovery_points(records, SUB9_CP, SUB9_AWC))
    trace = synthetic_all_out(SUB9_CP, SUB9_AWC, -2e-6, 0.08)
    mp_a1, mp_a2, _ = fit_max_power_curve(trace, SUB9_CP, SUB9_AWC)
    return RiderModel(cp=SUB9_CP, awc=SUB9_AWC, rec_a=rec_a, rec_b=rec_b, mp_a1=mp_a1, mp_a2=mp_a2)


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def sub9() -> RiderModel:
    return RiderModel(cp=SUB9_CP, awc=SUB9_AWC, rec_a=0.8, rec_b=40.0, mp_a1=-2e-6, mp_a2=0.08)


@pytest.fixture
def road() -> PhysicsParams:
    return PhysicsParams(m_t=80.0)


@pytest.fixture
def lab() -> PhysicsParams:
    return PhysicsParams(m_t=80.0, lab_mode=True)


@pytest.fixture
def all_out_trace() -> PowerTrace:
    t = np.arange(180.0)
    p = np.where(t < 60, 600.0, 234.0)
    return PowerTrace(t, p, source="synthetic 3MAO")


@pytest.fixture
def two_climb_course():
    return load_profile(TWO_CLIMB_POINTS, 100.0, source="two-climb")


@pytest.fixture
def write_trace(tmp_path):
    """Write a time_s,power_w CSV and return its path"""

    def _write(name, t, p):
        path = tmp_path / name
        pd.DataFrame({"time_s": t, "power_w": p}).to_csv(path, index=False)
        return path

    return _write


@pytest.fixture
def make_constant_trace():
    return constant_trace


@pytest.fixture
def make_all_out():
    return synthetic_all_out


@pytest.fixture
def make_record():
    return interval_record


class SolvedCourse(NamedTuple):
    course: CourseProfile
    m: RiderModel
    prm: PhysicsParams
    tables: ValueTables
    plan: PacingPlan


@pytest.fixture(scope="session")
def solved_two_climb() -> SolvedCourse:
    """Fitted Sub 9 rider on the two-climb course, road physics, default 32 x 100 grid"""
    m = fitted_sub9()
    prm = PhysicsParams(m_t=80.0)
    course = load_profile(TWO_CLIMB_POINTS, 100.0, source="two-climb")
    tables = solve_backward(course, m, prm, SolverConfig(v_max=m.vmax))
    return SolvedCourse(course, m, prm, tables, extract_plan(tables, course, m, prm))
