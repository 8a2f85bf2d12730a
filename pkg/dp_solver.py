"""
Minimum-time pacing by backward dynamic programming.

Stages are fixed distance intervals. The state is (velocity node, remaining
energy); the decision is the next velocity node. Rider power follows from
the required-power equation and the next energy from the switching
fatigue/recovery model, so the power/required-power equality holds exactly.
Cost-to-go is linearly interpolated in energy between grid nodes.
"""

import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from course import CourseProfile
from errors import FingerprintMismatchError, InfeasiblePlanError, InputError, TableFormatError
from physics import PhysicsParams, required_power
from rider_model import EnergyState, RiderModel, fatigue_rate, recovery_rate
from utils import PathLike, fingerprint

logger = logging.getLogger(__name__)

MAGIC = b"PACRDP1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<7sBQQQQ")
_DX_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    dx: float = 100.0
    n_v: int = 32
    n_w: int = 100
    v_min: float = 0.5
    v_max: float = 16.0
    tie_epsilon: float = 1e-12
    v0: Optional[float] = None
    w0: Optional[float] = None
    workers: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.n_v < 2 or self.n_w < 2:
            raise ValueError(f"grid needs at least 2 nodes per axis, got n_v={self.n_v}, n_w={self.n_w}")
        if not 0 < self.v_min < self.v_max:
            raise ValueError(f"need 0 < v_min < v_max, got v_min={self.v_min}, v_max={self.v_max}")
        if not self.dx > 0:
            raise ValueError(f"dx must be > 0, got {self.dx}")
        if self.tie_epsilon < 0:
            raise ValueError("tie_epsilon must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_config(cls, config: Mapping[str, Any], m: Optional[RiderModel] = None, **overrides) -> "SolverConfig":
        """Config file values, then the rider's vmax, then explicit overrides"""
        solver = dict(config.get("solver", {}))
        kwargs: Dict[str, Any] = {
            "dx": float(solver.get("dx_m", cls.dx)),
            "n_v": int(solver.get("n_v", cls.n_v)),
            "n_w": int(solver.get("n_w", cls.n_w)),
            "v_min": float(solver.get("v_min_mps", cls.v_min)),
            "v_max": float(solver.get("v_max_mps", cls.v_max)),
            "tie_epsilon": float(solver.get("tie_epsilon_s", cls.tie_epsilon)),
        }
        if m is not None:
            kwargs["v_max"] = m.vmax
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def velocity_grid(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_v)

    def energy_grid(self, awc: float) -> np.ndarray:
        return np.linspace(0.0, awc, self.n_w)

    def start_velocity(self) -> float:
        return self.v_min if self.v0 is None else self.v0

    def start_energy(self, m: RiderModel) -> float:
        state = EnergyState.full(m) if self.w0 is None else EnergyState(self.w0)
        return state.validate(m).w

    def nearest_velocity_index(self, v: float) -> int:
        return int(np.argmin(np.abs(self.velocity_grid() - v)))

    def canonical(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("workers")
        return data

    def grid_canonical(self) -> Dict[str, Any]:
        """Settings that shape the tables; the start state does not"""
        data = self.canonical()
        data.pop("v0")
        data.pop("w0")
        return data


class Transition(NamedTuple):
    w_next: float
    p: float
    dt: float
    feasible: bool


def _transition_arrays(v_i, w_i, v_next, theta, m: RiderModel, prm: PhysicsParams, dx: float):
    dt = 2 * dx / (v_i + v_next)
    p_req = required_power(v_i, v_next, theta, prm, dx)
    # below zero the rider coasts and brakes
    p = np.maximum(p_req, 0.0)

    fatigue = p > m.cp
    at_cp = p == m.cp
    rec_rate = recovery_rate(p, m)
    w_fatigue = w_i + fatigue_rate(p, m) * dt
    w_recovery = np.minimum(m.awc, w_i + rec_rate * dt)
    w_next = np.where(fatigue, w_fatigue, np.where(at_cp, w_i, w_recovery))

    p_max = m.mp_a1 * w_i * w_i + m.mp_a2 * w_i + m.cp
    # a recovery line above CP would drain energy below CP; not allowed in a plan
    feasible = np.where(fatigue, (p <= p_max) & (w_fatigue >= 0), at_cp | (rec_rate >= 0))
    return w_next, p, dt, feasible


def transition(
    v_i: float, w_i: float, v_next: float, theta: float, m: RiderModel, prm: PhysicsParams, dx: float
) -> Transition:
    """One distance step from (v_i, w_i) to velocity v_next"""
    w_next, p, dt, feasible = _transition_arrays(
        np.float64(v_i), np.float64(w_i), np.float64(v_next), theta, m, prm, dx
    )
    return Transition(float(w_next), float(p), float(dt), bool(feasible))


def _bracket(w, w_grid: np.ndarray):
    """Lower node index and fraction of the way to the next node"""
    w = np.clip(w, w_grid[0], w_grid[-1])
    j = np.clip(np.searchsorted(w_grid, w, side="right") - 1, 0, w_grid.size - 2)
    frac = (w - w_grid[j]) / (w_grid[j + 1] - w_grid[j])
    return j, frac


def _interp_energy(cost_stage: np.ndarray, v_idx, w, w_grid: np.ndarray):
    """Linear interpolation of one stage's cost in energy; +inf is contagious"""
    j, frac = _bracket(w, w_grid)
    lo = cost_stage[v_idx, j]
    hi = cost_stage[v_idx, j + 1]
    with np.errstate(invalid="ignore"):
        blended = (1 - frac) * lo + frac * hi
    return np.where(frac <= 0, lo, np.where(frac >= 1, hi, blended))


@dataclass(frozen=True)
class SolveSummary:
    n_stages: int
    n_v: int
    n_w: int
    workers: int
    seconds: float


@dataclass(eq=False)
class ValueTables:
    cost_to_go: np.ndarray
    policy: np.ndarray
    config: SolverConfig
    awc: float
    fingerprints: Dict[str, str]
    summary: Optional[SolveSummary] = field(default=None, compare=False)

    @property
    def n_stages(self) -> int:
        return int(self.policy.shape[0])

    @property
    def v_grid(self) -> np.ndarray:
        return self.config.velocity_grid()

    @property
    def w_grid(self) -> np.ndarray:
        return self.config.energy_grid(self.awc)

    def value_at(self, stage: int, v_index: int, w: float) -> float:
        return float(_interp_energy(self.cost_to_go[stage], v_index, w, self.w_grid))

    def verify(self, course: CourseProfile, m: RiderModel, prm: PhysicsParams,
               cfg: Optional[SolverConfig] = None, source: Optional[str] = None) -> None:
        expected = table_fingerprints(course, m, prm, cfg or self.config)
        for name in ("config", "model", "physics", "course"):
            if expected[name] != self.fingerprints.get(name):
                logger.error("Tables from %s do not match the %s", source or "memory", name)
                raise FingerprintMismatchError(name, expected[name], str(self.fingerprints.get(name)), source)


def table_fingerprints(course: CourseProfile, m: RiderModel, prm: PhysicsParams, cfg: SolverConfig) -> Dict[str, str]:
    parts = {
        "config": cfg.grid_canonical(),
        "model": m.to_document(),
        "physics": prm.to_document(),
        "course": course.canonical(),
    }
    prints = {name: fingerprint(payload) for name, payload in parts.items()}
    prints["combined"] = fingerprint(parts)
    return prints


class _StageContext(NamedTuple):
    theta: float
    cost_next: np.ndarray
    v_grid: np.ndarray
    w_grid: np.ndarray
    m: RiderModel
    prm: PhysicsParams
    dx: float


def _score_options(ctx: _StageContext, v_i, w_i):
    """Total time of every next-velocity option; the last axis indexes v_next"""
    v_i = np.asarray(v_i, dtype=float)[..., None]
    w_i = np.asarray(w_i, dtype=float)[..., None]
    w_next, p, dt, feasible = _transition_arrays(v_i, w_i, ctx.v_grid, ctx.theta, ctx.m, ctx.prm, ctx.dx)
    shape = np.broadcast_shapes(w_next.shape, p.shape)
    w_next = np.broadcast_to(w_next, shape)
    v_idx = np.broadcast_to(np.arange(ctx.v_grid.size), shape)
    future = _interp_energy(ctx.cost_next, v_idx, w_next, ctx.w_grid)
    total = np.where(feasible, dt + future, np.inf)
    return total, np.broadcast_to(p, shape), w_next, np.broadcast_to(dt, shape), np.broadcast_to(feasible, shape)


def _choose(total: np.ndarray, tie_epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Best total and its option index (lowest index within tie_epsilon), -1 if none"""
    best = np.asarray(total.min(axis=-1))
    finite = np.isfinite(best)
    within = total <= (best + tie_epsilon)[..., None]
    choice = np.where(finite, np.argmax(within, axis=-1), -1)
    return np.where(finite, best, np.inf), choice


def _check_inputs(course: CourseProfile, cfg: SolverConfig) -> None:
    if course.n_intervals == 0:
        raise InputError("course has no intervals", source=course.source)
    if abs(course.dx - cfg.dx) > _DX_TOL * cfg.dx:
        raise InputError(f"course step {course.dx} m differs from solver dx {cfg.dx} m", source=course.source)


def solve_backward(course: CourseProfile, m: RiderModel, prm: PhysicsParams, cfg: SolverConfig) -> ValueTables:
    """Backward pass over all stages; each stage is a barrier, rows are split across workers"""
    _check_inputs(course, cfg)
    n = course.n_intervals
    v_grid = cfg.velocity_grid()
    w_grid = cfg.energy_grid(m.awc)

    cost = np.empty((n + 1, cfg.n_v, cfg.n_w), dtype=np.float64)
    policy = np.empty((n, cfg.n_v, cfg.n_w), dtype=np.int64)
    cost[n] = 0.0

    workers = min(cfg.workers, cfg.n_v)
    row_blocks = [block for block in np.array_split(np.arange(cfg.n_v), workers) if block.size]

    def solve_rows(ctx: _StageContext, stage: int, rows: np.ndarray) -> None:
        total, _, _, _, _ = _score_options(ctx, v_grid[rows][:, None], w_grid[None, :])
        best, choice = _choose(total, cfg.tie_epsilon)
        cost[stage, rows] = best
        policy[stage, rows] = choice

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for stage in range(n - 1, -1, -1):
            ctx = _StageContext(float(course.theta[stage]), cost[stage + 1], v_grid, w_grid, m, prm, cfg.dx)
            # consume the iterator so worker errors surface and the stage completes
            list(pool.map(lambda rows: solve_rows(ctx, stage, rows), row_blocks))
            logger.debug("Stage %d solved", stage)
    elapsed = time.perf_counter() - started
    logger.info(
        "Solved %d stages x %d velocity x %d energy nodes in %.2f s (%d workers)",
        n, cfg.n_v, cfg.n_w, elapsed, workers,
    )
    return ValueTables(
        cost_to_go=cost,
        policy=policy,
        config=cfg,
        awc=m.awc,
        fingerprints=table_fingerprints(course, m, prm, cfg),
        summary=SolveSummary(n, cfg.n_v, cfg.n_w, workers, elapsed),
    )


@dataclass(frozen=True)
class PlanRow:
    """One interval: entry position, velocity and energy, the power held, clock at exit"""

    x: float
    v: float
    p: float
    w: float
    t_elapsed: float
    v_exit: float
    w_exit: float
    dt: float


@dataclass(frozen=True)
class PacingPlan:
    rows: List[PlanRow]
    total_time: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "distance_m": [r.x for r in self.rows],
                "target_power_w": [r.p for r in self.rows],
                "velocity_mps": [r.v for r in self.rows],
                "remaining_energy_j": [r.w for r in self.rows],
                "elapsed_time_s": [r.t_elapsed for r in self.rows],
            }
        )


def write_plan_csv(plan: PacingPlan, path: PathLike) -> None:
    plan.to_frame().to_csv(path, index=False)


def read_plan_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise InputError("file not found", source=str(path))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"unreadable CSV: {e}", source=str(path))
    needed = {"distance_m", "target_power_w", "velocity_mps", "remaining_energy_j", "elapsed_time_s"}
    if not needed <= set(df.columns):
        raise InputError(f"missing plan columns {sorted(needed - set(df.columns))}", source=str(path))
    return df


def best_option(ctx: _StageContext, v: float, w: float, tie_epsilon: float) -> Optional[Tuple[int, float, Transition]]:
    """Full lookup from a continuous state: (v_next index, total, transition) or None"""
    total, p, w_next, dt, feasible = _score_options(ctx, v, w)
    best, choice = _choose(total, tie_epsilon)
    k = int(choice)
    if k < 0:
        return None
    return k, float(best), Transition(float(w_next[k]), float(p[k]), float(dt[k]), bool(feasible[k]))


def stage_context(tables: ValueTables, course: CourseProfile, m: RiderModel, prm: PhysicsParams, stage: int,
                  dx: Optional[float] = None) -> _StageContext:
    """Scoring context for one stage; `dx` shortens the step to what is left of the interval"""
    return _StageContext(
        float(course.theta[stage]), tables.cost_to_go[stage + 1], tables.v_grid, tables.w_grid, m, prm,
        tables.config.dx if dx is None else dx,
    )


def _first_infeasible_stage(course, m, prm, cfg, v_index: int, w: float, start: int = 0) -> Optional[int]:
    """Walk forward keeping as much energy as possible; first stage with no admissible step"""
    v_grid = cfg.velocity_grid()
    for stage in range(start, course.n_intervals):
        w_next, _, _, feasible = _transition_arrays(
            np.float64(v_grid[v_index]), np.float64(w), v_grid, float(course.theta[stage]), m, prm, cfg.dx
        )
        if not feasible.any():
            return stage
        kept = np.where(feasible, w_next, -np.inf)
        v_index = int(np.argmax(kept))
        w = float(kept[v_index])
    return None


def extract_plan(tables: ValueTables, course: CourseProfile, m: RiderModel, prm: PhysicsParams,
                 cfg: Optional[SolverConfig] = None) -> PacingPlan:
    """Forward rollout through the stored policy with energy carried exactly"""
    cfg = cfg or tables.config
    tables.verify(course, m, prm, cfg)
    plan = plan_from_state(tables, course, m, prm, 0, cfg.start_velocity(), cfg.start_energy(m), cfg)
    logger.info("Plan: %d intervals, total time %.1f s", len(plan.rows), plan.total_time)
    return plan


def plan_from_state(tables: ValueTables, course: CourseProfile, m: RiderModel, prm: PhysicsParams, stage: int,
                    v: float, w: float, cfg: Optional[SolverConfig] = None) -> PacingPlan:
    """Policy rollout from the start of `stage`, velocity snapped to the nearest node.

    Fingerprints are not checked here; callers verify the tables once.
    """
    cfg = cfg or tables.config
    if not 0 <= stage < course.n_intervals:
        raise ValueError(f"stage {stage} outside [0, {course.n_intervals})")
    v_grid = tables.v_grid
    iv = cfg.nearest_velocity_index(v)
    w = EnergyState(float(w)).validate(m).w
    if not math.isfinite(tables.value_at(stage, iv, w)):
        first = _first_infeasible_stage(course, m, prm, cfg, iv, w, start=stage)
        raise InfeasiblePlanError(f"no feasible plan from v={v_grid[iv]:.2f} m/s, w={w:.0f} J", stage=first)
    return _rollout(tables, course, m, prm, cfg, stage, iv, w)


def _rollout(tables: ValueTables, course: CourseProfile, m: RiderModel, prm: PhysicsParams, cfg: SolverConfig,
             start: int, iv: int, w: float) -> PacingPlan:
    v_grid = tables.v_grid
    w_grid = tables.w_grid
    rows: List[PlanRow] = []
    t = 0.0
    for stage in range(start, course.n_intervals):
        j, frac = _bracket(w, w_grid)
        nodes = [int(j)] if frac <= 0 else [int(j), int(j) + 1]
        candidates = sorted({int(tables.policy[stage, iv, node]) for node in nodes} - {-1})

        chosen: Optional[Tuple[int, float, Transition]] = None
        for k in candidates:
            tr = transition(v_grid[iv], w, v_grid[k], float(course.theta[stage]), m, prm, cfg.dx)
            if not tr.feasible:
                continue
            total = tr.dt + tables.value_at(stage + 1, k, tr.w_next)
            if math.isfinite(total) and (chosen is None or total < chosen[1] - cfg.tie_epsilon):
                chosen = (k, total, tr)
        if chosen is None:
            chosen = best_option(stage_context(tables, course, m, prm, stage), v_grid[iv], w, cfg.tie_epsilon)
            if chosen is None:
                raise InfeasiblePlanError("plan rollout ran out of feasible transitions", stage=stage)
            logger.debug("Stage %d: bracketing policies infeasible, used full lookup", stage)

        k, _, tr = chosen
        t += tr.dt
        rows.append(PlanRow(
            x=stage * cfg.dx, v=float(v_grid[iv]), p=tr.p, w=w, t_elapsed=t,
            v_exit=float(v_grid[k]), w_exit=tr.w_next, dt=tr.dt,
        ))
        iv, w = k, tr.w_next
    return PacingPlan(rows=rows, total_time=t)


def export_tables(tables: ValueTables, path: PathLike) -> None:
    """Write the versioned little-endian table container"""
    meta = json.dumps(
        {"config": tables.config.canonical(), "awc": tables.awc, "fingerprints": tables.fingerprints},
        sort_keys=True,
    ).encode("utf-8")
    n_stages, n_v, n_w = tables.policy.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n_stages, n_v, n_w, len(meta)))
        f.write(meta)
        f.write(np.ascontiguousarray(tables.cost_to_go, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(tables.policy, dtype="<i8").tobytes())


def import_tables(path: PathLike, course: Optional[CourseProfile] = None, m: Optional[RiderModel] = None,
                  prm: Optional[PhysicsParams] = None, workers: int = 1) -> ValueTables:
    """Read a table container; with course, model and physics given, verify fingerprints"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise InputError("file not found", source=str(path))

    if len(data) < _HEADER.size:
        raise TableFormatError("file shorter than the table header", source=str(path))
    magic, version, n_stages, n_v, n_w, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TableFormatError("not a pacing table file (bad magic bytes)", source=str(path))
    if version != FORMAT_VERSION:
        raise TableFormatError(f"unsupported table format version {version}", source=str(path))

    n_cost = (n_stages + 1) * n_v * n_w
    n_policy = n_stages * n_v * n_w
    expected = _HEADER.size + meta_len + 8 * (n_cost + n_policy)
    if len(data) != expected:
        raise TableFormatError(f"expected {expected} bytes, found {len(data)} (truncated or padded)", source=str(path))

    offset = _HEADER.size
    try:
        meta = json.loads(data[offset:offset + meta_len].decode("utf-8"))
        cfg = SolverConfig(**meta["config"], workers=workers)
        awc = float(meta["awc"])
        prints = {str(k): str(v) for k, v in meta["fingerprints"].items()}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise TableFormatError(f"corrupt metadata block: {e}", source=str(path))
    if (cfg.n_v, cfg.n_w) != (n_v, n_w):
        raise TableFormatError("header dimensions disagree with metadata", source=str(path))
    offset += meta_len

    cost = np.frombuffer(data, dtype="<f8", count=n_cost, offset=offset).reshape(n_stages + 1, n_v, n_w)
    offset += 8 * n_cost
    policy = np.frombuffer(data, dtype="<i8", count=n_policy, offset=offset).reshape(n_stages, n_v, n_w)

    tables = ValueTables(
        cost_to_go=cost.astype(np.float64), policy=policy.astype(np.int64), config=cfg, awc=awc, fingerprints=prints
    )
    if course is not None and m is not None and prm is not None:
        tables.verify(course, m, prm, source=str(path))
    return tables
