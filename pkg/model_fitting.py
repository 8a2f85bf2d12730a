"""
Model Fitting Module
Turns laboratory power traces (3-min all-out, interval recovery tests)
into rider model parameters.

Integration convention: trapezoid on the raw timestamps, with the first and
last samples each held for half the median sampling period. A uniformly
sampled trace therefore integrates to sum(sample) * period.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from errors import InputError
from utils import PathLike, load_json_document

logger = logging.getLogger(__name__)

ALL_OUT_DURATION_S = 180.0
CP_WINDOW_S = 30.0
CP4_DURATION_S = 240.0
_TIME_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PowerTrace:
    t: np.ndarray
    p: np.ndarray
    smo2: Optional[np.ndarray] = None
    source: str = field(default="trace", compare=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)
        if self.smo2 is not None:
            object.__setattr__(self, "smo2", np.asarray(self.smo2, dtype=float))

        if t.ndim != 1 or t.shape != p.shape:
            raise InputError("time and power columns must be 1-D and equally long", source=self.source)
        if t.size < 2:
            raise InputError(f"need at least 2 samples, got {t.size}", source=self.source)
        bad = np.flatnonzero(~np.isfinite(t) | ~np.isfinite(p))
        if bad.size:
            raise InputError("non-numeric time or power", source=self.source, record=int(bad[0]))
        steps = np.flatnonzero(np.diff(t) <= 0)
        if steps.size:
            raise InputError("timestamps must be strictly increasing", source=self.source, record=int(steps[0] + 1))
        negative = np.flatnonzero(p < 0)
        if negative.size:
            raise InputError("power must be >= 0", source=self.source, record=int(negative[0]))

    @classmethod
    def from_csv(cls, path: PathLike) -> "PowerTrace":
        path = Path(path)
        try:
            df = pd.read_csv(path)
        except FileNotFoundError:
            raise InputError("file not found", source=str(path))
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise InputError(f"unreadable CSV: {e}", source=str(path))

        missing = {"time_s", "power_w"} - set(df.columns)
        if missing:
            raise InputError(f"missing columns {sorted(missing)}; header must be time_s,power_w[,smo2_pct]", source=str(path))
        t = pd.to_numeric(df["time_s"], errors="coerce").to_numpy(dtype=float)
        p = pd.to_numeric(df["power_w"], errors="coerce").to_numpy(dtype=float)
        smo2 = None
        if "smo2_pct" in df.columns:
            smo2 = pd.to_numeric(df["smo2_pct"], errors="coerce").to_numpy(dtype=float)
        return cls(t, p, smo2, source=str(path))

    @property
    def period(self) -> float:
        return float(np.median(np.diff(self.t)))

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0] + self.period)

    def tail(self, seconds: float) -> "PowerTrace":
        """Samples whose bins lie inside the final `seconds` of the trace"""
        h = self.period
        keep = self.t >= self.t[-1] + h - seconds - _TIME_TOL
        smo2 = self.smo2[keep] if self.smo2 is not None else None
        return PowerTrace(self.t[keep], self.p[keep], smo2, source=self.source)

    def from_index(self, start: int) -> "PowerTrace":
        smo2 = self.smo2[start:] if self.smo2 is not None else None
        return PowerTrace(self.t[start:], self.p[start:], smo2, source=self.source)


@dataclass(frozen=True)
class IntervalTestRecord:
    fatigue_seg: PowerTrace
    recovery_power: float
    recovery_duration: float
    final_mao: PowerTrace

    def __post_init__(self):
        if self.recovery_duration <= 0:
            raise InputError(f"recovery duration must be > 0, got {self.recovery_duration}")
        if self.recovery_power < 0:
            raise InputError(f"recovery power must be >= 0, got {self.recovery_power}")


@dataclass(frozen=True)
class IntervalManifest:
    records: List[IntervalTestRecord]
    cp: Optional[float] = None
    awc: Optional[float] = None


@dataclass(frozen=True)
class FitDiagnostics:
    residual_rms: float
    n_points: int
    r_squared: float

    @classmethod
    def from_residuals(cls, y: np.ndarray, y_hat: np.ndarray) -> "FitDiagnostics":
        residual = y - y_hat
        rms = float(np.sqrt(np.mean(residual * residual)))
        r2 = float(r2_score(y, y_hat)) if y.size >= 2 else 1.0
        return cls(residual_rms=rms, n_points=int(y.size), r_squared=min(max(r2, 0.0), 1.0))


@dataclass(frozen=True)
class RecoveryMeasurement:
    recovery_power: float
    recovery_duration: float
    w_rec: float
    p_adj: float

    @property
    def negative(self) -> bool:
        return self.w_rec < 0


def _binned_integral(t: np.ndarray, y: np.ndarray) -> float:
    h = float(np.median(np.diff(t)))
    return float(trapezoid(y, t) + 0.5 * h * (y[0] + y[-1]))


def energy_above_cp(trace: PowerTrace, cp: float) -> float:
    """Area between the power trace and CP, dips below CP counting as zero"""
    return _binned_integral(trace.t, np.maximum(trace.p - cp, 0.0))


def mean_power(trace: PowerTrace) -> float:
    """Time-weighted mean power"""
    return _binned_integral(trace.t, trace.p) / trace.duration


def fit_cp_awc(trace: PowerTrace) -> Tuple[float, float]:
    """CP from the last 30 s of a 3-min all-out effort, AWC from the area above it"""
    if trace.duration < ALL_OUT_DURATION_S - _TIME_TOL:
        raise InputError(
            f"3-min all-out trace covers {trace.duration:.1f} s, need {ALL_OUT_DURATION_S:.0f} s",
            source=trace.source,
        )
    window = trace.tail(ALL_OUT_DURATION_S)
    cp = mean_power(window.tail(CP_WINDOW_S))
    awc = energy_above_cp(window, cp)
    logger.info("Fitted cp=%.1f W awc=%.0f J from %s", cp, awc, trace.source)
    return cp, awc


def cp4_power(cp: float, awc: float) -> float:
    """Constant power that empties a full tank in exactly 4 minutes"""
    if cp < 0 or awc < 0:
        raise ValueError(f"cp and awc must be non-negative, got cp={cp}, awc={awc}")
    return cp + awc / CP4_DURATION_S


def recovered_energy(rec: IntervalTestRecord, cp: float, awc: float) -> float:
    """Energy recovered during the recovery interval: the two supra-CP areas minus AWC"""
    w_rec = energy_above_cp(rec.fatigue_seg, cp) + energy_above_cp(rec.final_mao, cp) - awc
    if w_rec < 0:
        logger.warning(
            "Negative recovered energy %.0f J at %.0f W for %.0f s (%s); treated as noise",
            w_rec, rec.recovery_power, rec.recovery_duration, rec.final_mao.source,
        )
    return w_rec


def adjusted_power(w_rec: float, t_rec: float, cp: float) -> float:
    if t_rec <= 0:
        raise ValueError(f"recovery duration must be > 0, got {t_rec}")
    return cp - w_rec / t_rec


def measure_recovery(rec: IntervalTestRecord, cp: float, awc: float) -> RecoveryMeasurement:
    if rec.recovery_power >= cp:
        raise InputError(
            f"recovery power {rec.recovery_power} W is not below cp {cp} W", source=rec.final_mao.source
        )
    w_rec = recovered_energy(rec, cp, awc)
    return RecoveryMeasurement(
        recovery_power=rec.recovery_power,
        recovery_duration=rec.recovery_duration,
        w_rec=w_rec,
        p_adj=adjusted_power(w_rec, rec.recovery_duration, cp),
    )


def recovery_points(
    records: Sequence[IntervalTestRecord], cp: float, awc: float, include_negative: bool = False
) -> List[Tuple[float, float]]:
    """(recovery power, mean adjusted power) per power level, unweighted over durations"""
    rows = []
    for rec in records:
        m = measure_recovery(rec, cp, awc)
        if m.negative and not include_negative:
            continue
        rows.append({"power": m.recovery_power, "p_adj": m.p_adj})
    if not rows:
        return []
    means = pd.DataFrame(rows).groupby("power", sort=True)["p_adj"].mean()
    return [(float(p), float(p_adj)) for p, p_adj in means.items()]


def fit_recovery_line(points: Sequence[Tuple[float, float]]) -> Tuple[float, float, FitDiagnostics]:
    """Least-squares line p_adj = a * p + b"""
    data = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = data[:, 0], data[:, 1]
    if np.unique(x).size < 2:
        raise ValueError("recovery line needs at least 2 distinct recovery powers")

    reg = LinearRegression().fit(x.reshape(-1, 1), y)
    a, b = float(reg.coef_[0]), float(reg.intercept_)
    diag = FitDiagnostics.from_residuals(y, reg.predict(x.reshape(-1, 1)))
    logger.info("Recovery line a=%.4f b=%.2f W (rms %.3g W, n=%d)", a, b, diag.residual_rms, diag.n_points)
    return a, b, diag


def remaining_energy_curve(trace: PowerTrace, cp: float, awc: float) -> np.ndarray:
    """W per sample, starting full at the first sample"""
    excess = np.maximum(trace.p - cp, 0.0)
    return awc - cumulative_trapezoid(excess, trace.t, initial=0.0)


def fit_max_power_curve(trace: PowerTrace, cp: float, awc: float) -> Tuple[float, float, FitDiagnostics]:
    """Fit p - cp = a1 * W^2 + a2 * W over the post-peak part of an all-out effort.

    Samples before the global power maximum are dropped before W is tracked.
    """
    peak = int(np.argmax(trace.p))
    post = trace.from_index(peak)
    if post.t.size < 2:
        raise ValueError(f"need at least 2 samples from the power peak on, got {post.t.size}")

    w = remaining_energy_curve(post, cp, awc)
    if np.ptp(w) <= 0:
        raise ValueError("remaining energy never changes after the peak; max-power curve is undetermined")

    X = np.column_stack([w * w, w])
    y = post.p - cp
    reg = LinearRegression(fit_intercept=False).fit(X, y)
    a1, a2 = float(reg.coef_[0]), float(reg.coef_[1])
    diag = FitDiagnostics.from_residuals(y, reg.predict(X))
    logger.info("Max-power curve a1=%.4g a2=%.4g (rms %.3g W, n=%d)", a1, a2, diag.residual_rms, diag.n_points)
    return a1, a2, diag


def load_interval_manifest(path: PathLike) -> IntervalManifest:
    """Read the interval-test manifest; segment paths resolve relative to it"""
    path = Path(path)
    doc = load_json_document(path)
    tests = doc.get("tests")
    if not isinstance(tests, list) or not tests:
        raise InputError("manifest needs a non-empty 'tests' list", source=str(path))

    records = []
    for i, entry in enumerate(tests):
        try:
            fatigue = PowerTrace.from_csv(path.parent / entry["fatigue_trace"])
            final = PowerTrace.from_csv(path.parent / entry["final_mao_trace"])
            records.append(
                IntervalTestRecord(
                    fatigue_seg=fatigue,
                    recovery_power=float(entry["recovery_power_w"]),
                    recovery_duration=float(entry["recovery_duration_s"]),
                    final_mao=final,
                )
            )
        except KeyError as e:
            raise InputError(f"test entry missing key {e}", source=str(path), record=i)
        except (TypeError, ValueError) as e:
            if isinstance(e, InputError):
                raise
            raise InputError(f"bad test entry: {e}", source=str(path), record=i)

    cp = float(doc["cp_w"]) if "cp_w" in doc else None
    awc = float(doc["awc_j"]) if "awc_j" in doc else None
    return IntervalManifest(records=records, cp=cp, awc=awc)
