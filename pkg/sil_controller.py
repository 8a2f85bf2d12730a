"""
Software-in-the-loop controller: dead-reckoning state estimation from logged
power and velocity, table lookup power recommendation, a plan follower that
replans when the rider drifts off the plan, and a closed-loop ride simulator
with a simulated rider.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from course import CourseProfile
from dp_solver import (
    PacingPlan,
    SolverConfig,
    Transition,
    ValueTables,
    best_option,
    plan_from_state,
    stage_context,
)
from errors import InfeasiblePlanError, InputError
from physics import MAX_SUBSTEP_S, PhysicsParams, accelerate
from rider_model import RiderModel, energy_rate, max_power
from utils import PathLike

logger = logging.getLogger(__name__)

RIDE_LOG_COLUMNS = [
    "time_s",
    "distance_m",
    "velocity_mps",
    "power_cmd_w",
    "power_applied_w",
    "remaining_energy_j",
]

TICK_S = 1.0
MAX_DURATION_S = 6 * 3600.0


@dataclass(frozen=True)
class RideSample:
    t: float
    p: float
    v: float
    smo2: Optional[float] = None

    def __post_init__(self):
        if self.p < 0:
            raise ValueError(f"power must be >= 0, got {self.p}")
        if self.v < 0:
            raise ValueError(f"velocity must be >= 0, got {self.v}")


@dataclass(frozen=True)
class EstimatedState:
    x: float
    v: float
    w: float
    clamp_events: int = 0


@dataclass(frozen=True)
class RiderBehavior:
    """How a simulated rider deviates from the commanded power"""

    power_bias: float = 0.0
    power_noise_sd: float = 0.0
    response_lag: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.power_noise_sd < 0:
            raise ValueError(f"power_noise_sd must be >= 0, got {self.power_noise_sd}")
        if self.response_lag < 0:
            raise ValueError(f"response_lag must be >= 0, got {self.response_lag}")


@dataclass(frozen=True)
class Recommendation:
    power: float
    v_next: Optional[float]
    stage: int
    feasible: bool


@dataclass
class RideResult:
    log: pd.DataFrame
    achieved_time: float
    completed: bool
    infeasible_stage: Optional[int] = None
    clamp_events: int = 0
    overreach_events: int = 0
    replans: int = 0


Controller = Callable[[EstimatedState, int], Recommendation]


def estimate_state(
    prev: EstimatedState, samples: Sequence[RideSample], m: RiderModel, course_length: Optional[float] = None
) -> EstimatedState:
    """Advance x and w over a batch of samples with the trapezoid rule.

    The batch spans the step, first sample at its start. Energy follows the
    switching model sample by sample and is clamped to [0, awc] after each
    pair; every clamp is counted.
    """
    if not samples:
        raise ValueError("need at least one sample")
    t = np.array([s.t for s in samples], dtype=float)
    p = np.array([s.p for s in samples], dtype=float)
    v = np.array([s.v for s in samples], dtype=float)
    backwards = np.flatnonzero(np.diff(t) < 0)
    if backwards.size:
        raise ValueError(f"time goes backwards at sample {int(backwards[0]) + 1}")

    dt = np.diff(t)
    x = prev.x + float(np.sum(0.5 * (v[:-1] + v[1:]) * dt))
    if course_length is not None:
        x = min(x, course_length)

    rate = np.atleast_1d(energy_rate(p, m))
    w = prev.w
    clamps = prev.clamp_events
    for r0, r1, h in zip(rate[:-1], rate[1:], dt):
        w = w + 0.5 * (r0 + r1) * h
        if w < 0.0 or w > m.awc:
            clamps += 1
            logger.debug("Energy clamped from %.1f J at x=%.0f m", w, x)
            w = min(max(w, 0.0), m.awc)
    return EstimatedState(x=x, v=float(v[-1]), w=float(w), clamp_events=clamps)


class _Lookup(NamedTuple):
    stage: int
    x0: float
    v: float
    w: float
    option: Optional[Tuple[int, float, Transition]]


def _stage_lookup(state: EstimatedState, tables: ValueTables, course: CourseProfile, m: RiderModel,
                  prm: PhysicsParams, cfg: SolverConfig, tick: float) -> _Lookup:
    """Score every next-velocity node over what is left of the current interval.

    A rider less than half a tick from the boundary is planned from the start
    of the next interval instead.
    """
    stage = course.stage_at(state.x)
    v = min(max(state.v, cfg.v_min), cfg.v_max)
    w = min(max(state.w, 0.0), m.awc)
    x0 = min(max(state.x, stage * cfg.dx), (stage + 1) * cfg.dx)
    remaining = (stage + 1) * cfg.dx - x0
    reach = min(cfg.dx, 0.5 * v * tick)
    if remaining < reach and stage + 1 < course.n_intervals:
        stage += 1
        x0, remaining = stage * cfg.dx, cfg.dx
    remaining = max(remaining, reach)

    ctx = stage_context(tables, course, m, prm, stage, dx=remaining)
    return _Lookup(stage, x0, v, w, best_option(ctx, v, w, cfg.tie_epsilon))


def recommend_power(
    state: EstimatedState,
    tables: ValueTables,
    course: CourseProfile,
    m: RiderModel,
    prm: PhysicsParams,
    cfg: Optional[SolverConfig] = None,
    tick: float = TICK_S,
) -> Recommendation:
    """Best power to hold from a continuous state, looked up in the solved tables.

    A mid-interval state is aimed at a velocity node at the interval boundary,
    over the distance still to ride.
    """
    cfg = cfg or tables.config
    look = _stage_lookup(state, tables, course, m, prm, cfg, tick)
    if look.option is None:
        logger.warning("No feasible transition at stage %d (v=%.2f m/s, w=%.0f J); hold CP", look.stage, look.v, look.w)
        return Recommendation(power=m.cp, v_next=None, stage=look.stage, feasible=False)
    k, _, tr = look.option
    return Recommendation(power=tr.p, v_next=float(tables.v_grid[k]), stage=look.stage, feasible=True)


def hold_power_controller(power: float) -> Controller:
    """A rider who ignores recommendations and holds one power"""

    def controller(state: EstimatedState, stage: int) -> Recommendation:
        return Recommendation(power=power, v_next=None, stage=stage, feasible=True)

    return controller


def _substeps(tick: float, substep: float) -> Tuple[int, float]:
    n_sub = max(1, math.ceil(tick / substep - 1e-12))
    return n_sub, tick / n_sub


def _ride_tick(state: EstimatedState, power: float, course: CourseProfile, m: RiderModel, prm: PhysicsParams,
               cfg: SolverConfig, n_sub: int, h: float) -> Tuple[EstimatedState, float]:
    """Hold `power` for one tick: next estimated state and seconds ridden"""
    length = course.total_length
    samples = [RideSample(0.0, power, state.v)]
    x, v = state.x, state.v
    crossed = False
    for i in range(n_sub):
        v_new = accelerate(v, power, course.theta_at(x), prm, h, cfg.v_min, cfg.v_max, max_substep=h)
        x_new = x + 0.5 * (v + v_new) * h
        if x_new >= length:
            frac = (length - x) / (x_new - x)
            samples.append(RideSample((i + frac) * h, power, v + frac * (v_new - v)))
            crossed = True
            break
        x, v = x_new, v_new
        samples.append(RideSample((i + 1) * h, power, v))

    nxt = estimate_state(state, samples, m, course_length=length)
    if crossed:
        # dead reckoning of the partial sub-step can land a hair short of the line
        nxt = replace(nxt, x=length)
    return nxt, samples[-1].t


class PlanFollower:
    """Rides a reference plan and replans from the tables when the rider drifts.

    Each tick the controller predicts where the rider will be after holding
    the reference power, with the simulator's own physics and estimator. The
    next tick it compares that prediction with the estimated state; when
    velocity or energy is off by more than `tolerance_cells` grid cells the
    tables are looked up from the estimated state and the reference is
    rebuilt from there. A rider who delivers exactly what is asked never
    triggers a replan.
    """

    def __init__(
        self,
        tables: ValueTables,
        course: CourseProfile,
        m: RiderModel,
        prm: PhysicsParams,
        cfg: Optional[SolverConfig] = None,
        tick: float = TICK_S,
        substep: float = MAX_SUBSTEP_S,
        tolerance_cells: float = 1.0,
    ):
        self.tables = tables
        self.course = course
        self.m = m
        self.prm = prm
        self.cfg = cfg or tables.config
        self.tick = tick
        self.n_sub, self.h = _substeps(tick, substep)
        self.v_tolerance = tolerance_cells * (self.cfg.v_max - self.cfg.v_min) / (self.cfg.n_v - 1)
        self.w_tolerance = tolerance_cells * m.awc / (self.cfg.n_w - 1)
        self.replans = 0
        self._reference: Dict[int, Tuple[float, float]] = {}
        self._predicted: Optional[EstimatedState] = None

        try:
            plan = plan_from_state(
                tables, course, m, prm, 0, self.cfg.start_velocity(), self.cfg.start_energy(m), self.cfg
            )
        except InfeasiblePlanError as e:
            logger.warning("No reference plan from the start state (%s); replanning every tick", e)
        else:
            self._follow(plan, 0)

    def _follow(self, plan: PacingPlan, start: int) -> None:
        for stage, row in enumerate(plan.rows, start=start):
            self._reference[stage] = (row.p, row.v_exit)

    def off_track(self, state: EstimatedState) -> bool:
        if self._predicted is None:
            return False
        return (
            abs(state.v - self._predicted.v) > self.v_tolerance
            or abs(state.w - self._predicted.w) > self.w_tolerance
        )

    def _replan(self, state: EstimatedState, stage: int) -> Optional[Recommendation]:
        self.replans += 1
        self._reference = {}
        look = _stage_lookup(state, self.tables, self.course, self.m, self.prm, self.cfg, self.tick)
        if look.option is None:
            return None
        k, _, tr = look.option
        v_next = float(self.tables.v_grid[k])
        # a look-ahead replan holds its power through the rest of this interval
        for s in range(stage, look.stage + 1):
            self._reference[s] = (tr.p, v_next)
        if look.stage + 1 < self.course.n_intervals:
            try:
                self._follow(plan_from_state(
                    self.tables, self.course, self.m, self.prm, look.stage + 1, v_next, tr.w_next, self.cfg
                ), look.stage + 1)
            except InfeasiblePlanError as e:
                logger.debug("Replan from stage %d has no continuation: %s", look.stage + 1, e)
        logger.debug("Replanned at x=%.0f m: %.0f W toward %.2f m/s", state.x, tr.p, v_next)
        return Recommendation(power=tr.p, v_next=v_next, stage=look.stage, feasible=True)

    def __call__(self, state: EstimatedState, stage: int) -> Recommendation:
        if stage in self._reference and not self.off_track(state):
            p, v_next = self._reference[stage]
            rec = Recommendation(power=p, v_next=v_next, stage=stage, feasible=True)
        else:
            rec = self._replan(state, stage)
            if rec is None:
                logger.warning("No feasible transition at stage %d (v=%.2f m/s, w=%.0f J)", stage, state.v, state.w)
                self._predicted = None
                return Recommendation(power=self.m.cp, v_next=None, stage=stage, feasible=False)

        applied = min(max(rec.power, 0.0), max_power(min(max(state.w, 0.0), self.m.awc), self.m))
        self._predicted, _ = _ride_tick(state, applied, self.course, self.m, self.prm, self.cfg, self.n_sub, self.h)
        return rec


def simulate_ride(
    course: CourseProfile,
    m: RiderModel,
    prm: PhysicsParams,
    cfg: Optional[SolverConfig],
    tables: ValueTables,
    behavior: Optional[RiderBehavior] = None,
    controller: Optional[Controller] = None,
    tick: float = TICK_S,
    substep: float = MAX_SUBSTEP_S,
    max_duration: float = MAX_DURATION_S,
) -> RideResult:
    """Closed-loop ride at one recommendation per tick.

    The simulated rider applies command + bias + lagged Gaussian noise,
    capped at max_power(w). Physics is integrated on sub-steps and the
    estimator updates energy from the sub-step samples. Without a controller
    the rider follows the solved plan through a PlanFollower.
    """
    cfg = cfg or tables.config
    tables.verify(course, m, prm, cfg)
    behavior = behavior or RiderBehavior()
    follower = None
    if controller is None:
        follower = PlanFollower(tables, course, m, prm, cfg, tick=tick, substep=substep)
        controller = follower

    rng = np.random.default_rng(behavior.seed)
    alpha = math.exp(-tick / behavior.response_lag) if behavior.response_lag > 0 else 0.0
    n_sub, h = _substeps(tick, substep)
    length = course.total_length

    state = EstimatedState(x=0.0, v=cfg.start_velocity(), w=float(cfg.start_energy(m)))
    t = 0.0
    noise = 0.0
    overreach = 0
    infeasible_stage = None
    rows: List[tuple] = []

    while state.x < length and t < max_duration:
        stage = course.stage_at(state.x)
        rec = controller(state, stage)
        if not rec.feasible:
            infeasible_stage = rec.stage
            rows.append((t, state.x, state.v, rec.power, float("nan"), state.w))
            break

        if behavior.power_noise_sd > 0:
            noise = alpha * noise + (1 - alpha) * rng.normal(0.0, behavior.power_noise_sd)
        applied = max(rec.power + behavior.power_bias + noise, 0.0)
        cap = max_power(state.w, m)
        if applied > cap:
            overreach += 1
            logger.debug("Applied power %.0f W above max %.0f W at t=%.0f s", applied, cap, t)
            applied = cap
        rows.append((t, state.x, state.v, rec.power, applied, state.w))

        state, elapsed = _ride_tick(state, applied, course, m, prm, cfg, n_sub, h)
        t += elapsed

    replans = follower.replans if follower is not None else 0
    completed = state.x >= length
    if completed:
        rows.append((t, state.x, state.v, rows[-1][3], rows[-1][4], state.w))
        logger.info(
            "Ride finished in %.1f s (%d clamps, %d overreach, %d replans)",
            t, state.clamp_events, overreach, replans,
        )
    elif infeasible_stage is not None:
        logger.warning("Ride stopped at stage %d: no feasible recommendation", infeasible_stage)
    else:
        logger.warning("Ride stopped after %.0f s at x=%.0f m without finishing", t, state.x)

    return RideResult(
        log=pd.DataFrame(rows, columns=RIDE_LOG_COLUMNS),
        achieved_time=t,
        completed=completed,
        infeasible_stage=infeasible_stage,
        clamp_events=state.clamp_events,
        overreach_events=overreach,
        replans=replans,
    )


def write_ride_log(result: RideResult, path: PathLike) -> None:
    result.log.to_csv(path, index=False)


def read_ride_csv(path: PathLike) -> pd.DataFrame:
    """Recorded ride: time_s,power_w,velocity_mps[,smo2_pct]"""
    path = Path(path)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise InputError("file not found", source=str(path))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"unreadable CSV: {e}", source=str(path))

    missing = {"time_s", "power_w", "velocity_mps"} - set(df.columns)
    if missing:
        raise InputError(f"missing columns {sorted(missing)}", source=str(path))
    for column in ("time_s", "power_w", "velocity_mps"):
        df[column] = pd.to_numeric(df[column], errors="coerce")
        bad = np.flatnonzero(df[column].isna().to_numpy() | (df[column].to_numpy() < 0))
        if bad.size:
            raise InputError(f"{column} must be a non-negative number", source=str(path), record=int(bad[0]))
    backwards = np.flatnonzero(np.diff(df["time_s"].to_numpy()) < 0)
    if backwards.size:
        raise InputError("time goes backwards", source=str(path), record=int(backwards[0]) + 1)
    return df


def reestimate_ride(
    frame: pd.DataFrame, m: RiderModel, course_length: Optional[float] = None, w0: Optional[float] = None
) -> pd.DataFrame:
    """Replay a recorded ride through the estimator, one row per sample"""
    smo2 = frame["smo2_pct"] if "smo2_pct" in frame.columns else pd.Series([None] * len(frame))
    samples = [
        RideSample(float(t), float(p), float(v), None if s is None or pd.isna(s) else float(s))
        for t, p, v, s in zip(frame["time_s"], frame["power_w"], frame["velocity_mps"], smo2)
    ]
    if not samples:
        raise InputError("ride has no samples")

    state = EstimatedState(x=0.0, v=samples[0].v, w=m.awc if w0 is None else w0)
    rows = [(samples[0].t, state.x, state.v, samples[0].p, state.w)]
    for prev, cur in zip(samples[:-1], samples[1:]):
        state = estimate_state(state, [prev, cur], m, course_length)
        rows.append((cur.t, state.x, state.v, cur.p, state.w))
    if state.clamp_events:
        logger.info("Re-estimation clamped energy %d times", state.clamp_events)
    return pd.DataFrame(rows, columns=["time_s", "distance_m", "velocity_mps", "power_w", "remaining_energy_j"])
