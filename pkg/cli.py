"""
Command-line entry point: model fitting, planning, closed-loop simulation,
ride re-estimation and plot export.

Exit codes: 0 success, 2 usage error, 3 input error, 4 infeasible
optimization, 5 fingerprint mismatch.
"""

import argparse
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from course import load_course, write_profile_csv
from dp_solver import (
    SolverConfig,
    export_tables,
    extract_plan,
    import_tables,
    read_plan_csv,
    solve_backward,
    write_plan_csv,
)
from errors import InfeasiblePlanError, InputError, PacerError, UsageError
from model_fitting import (
    PowerTrace,
    fit_cp_awc,
    fit_max_power_curve,
    fit_recovery_line,
    load_interval_manifest,
    recovery_points,
    remaining_energy_curve,
)
from physics import load_physics_params
from rider_model import load_rider_model
from sil_controller import (
    RiderBehavior,
    hold_power_controller,
    read_ride_csv,
    reestimate_ride,
    simulate_ride,
    write_ride_log,
)
from utils import configure_logging, load_config, resolve_workers, write_json_document
from visualizations import visualizer

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunManifest:
    subcommand: str
    inputs: Dict[str, str]
    overrides: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = "."
    tool_version: str = TOOL_VERSION

    @classmethod
    def prepare(cls, subcommand: str, inputs: Dict[str, Optional[str]], overrides: Dict[str, Any],
                output_dir: str) -> "RunManifest":
        """Resolve and check inputs, create the output directory"""
        resolved = {}
        for name, value in inputs.items():
            if value is None:
                continue
            path = Path(value)
            if not path.exists():
                raise InputError("file not found", source=str(path))
            resolved[name] = str(path.resolve())
        out = Path(output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise InputError(f"cannot create output directory: {e}", source=str(out))
        return cls(
            subcommand=subcommand,
            inputs=resolved,
            overrides={k: v for k, v in overrides.items() if v is not None},
            output_dir=str(out.resolve()),
        )

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def write(self) -> None:
        write_json_document(asdict(self), self.out / MANIFEST_NAME)


def _flag_type(cast, accept, requirement: str):
    """argparse `type=` callable: a bad value is a usage error (exit 2)"""

    def parse(text: str):
        try:
            value = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {cast.__name__}, got {text!r}")
        if not accept(value):
            raise argparse.ArgumentTypeError(f"must be {requirement}, got {text}")
        return value

    parse.__name__ = cast.__name__
    return parse


grid_nodes = _flag_type(int, lambda n: n >= 2, "at least 2")
worker_count = _flag_type(int, lambda n: n >= 0, ">= 0 (0 = all cores)")
positive_float = _flag_type(float, lambda x: math.isfinite(x) and x > 0, "a finite number > 0")
non_negative_float = _flag_type(float, lambda x: math.isfinite(x) and x >= 0, "a finite number >= 0")


def _fmt(value: float) -> str:
    """Shortest text that reads back as the same float"""
    return repr(float(value))


def cmd_fit_cp(args, config) -> int:
    manifest = RunManifest.prepare("fit-cp", {"trace": args.trace}, {}, args.out_dir)
    cp, awc = fit_cp_awc(PowerTrace.from_csv(args.trace))
    print(f"cp_w: {_fmt(cp)}")
    print(f"awc_j: {_fmt(awc)}")
    write_json_document({"cp_w": cp, "awc_j": awc}, manifest.out / "rider_fragment.json")
    manifest.write()
    return 0


def cmd_fit_recovery(args, config) -> int:
    intervals = load_interval_manifest(args.manifest)
    cp = args.cp if args.cp is not None else intervals.cp
    awc = args.awc if args.awc is not None else intervals.awc
    if cp is None or awc is None:
        raise InputError("cp and awc are needed (flags or cp_w/awc_j in the manifest)", source=args.manifest)
    points = recovery_points(intervals.records, cp, awc, include_negative=args.include_negative)
    try:
        a, b, diag = fit_recovery_line(points)
    except ValueError as e:
        raise InputError(str(e), source=args.manifest)
    print(f"rec_a: {_fmt(a)}")
    print(f"rec_b: {_fmt(b)}")
    print(f"residual_rms_w: {_fmt(diag.residual_rms)}")
    print(f"r_squared: {_fmt(diag.r_squared)}")
    print(f"n_points: {diag.n_points}")
    if args.plot:
        visualizer.write_svg(visualizer.create_recovery_fit(points, a, b), args.plot)
    return 0


def cmd_fit_maxpower(args, config) -> int:
    trace = PowerTrace.from_csv(args.trace)
    try:
        a1, a2, diag = fit_max_power_curve(trace, args.cp, args.awc)
    except ValueError as e:
        raise InputError(str(e), source=args.trace)
    print(f"mp_a1: {_fmt(a1)}")
    print(f"mp_a2: {_fmt(a2)}")
    print(f"residual_rms_w: {_fmt(diag.residual_rms)}")
    print(f"r_squared: {_fmt(diag.r_squared)}")
    print(f"n_points: {diag.n_points}")
    if args.plot:
        post = trace.from_index(int(np.argmax(trace.p)))
        w = remaining_energy_curve(post, args.cp, args.awc)
        visualizer.write_svg(visualizer.create_max_power_fit(w, post.p, args.cp, a1, a2), args.plot)
    return 0


def _load_rider(path: str, lab_mode: bool):
    m = load_rider_model(path)
    prm = load_physics_params(path, lab_mode=True if lab_mode else None)
    return m, prm


def cmd_plan(args, config) -> int:
    overrides = {"dx": args.dx, "n_v": args.nv, "n_w": args.nw, "v_max": args.vmax, "lab_mode": args.lab_mode or None}
    manifest = RunManifest.prepare("plan", {"course": args.course, "rider": args.rider}, overrides, args.out_dir)

    m, prm = _load_rider(args.rider, args.lab_mode)
    try:
        cfg = SolverConfig.from_config(config, m)
    except ValueError as e:
        raise InputError(f"solver settings: {e}", source=args.config or "config")
    flags = {"dx": args.dx, "n_v": args.nv, "n_w": args.nw, "v_max": args.vmax}
    workers = resolve_workers(args.threads)
    try:
        cfg = replace(cfg, workers=workers, **{k: v for k, v in flags.items() if v is not None})
    except ValueError as e:
        raise UsageError(str(e))
    course = load_course(args.course, cfg.dx, int(config["course"]["smoothing_window"]))

    tables = solve_backward(course, m, prm, cfg)
    export_tables(tables, manifest.out / "tables.bin")
    write_profile_csv(course, manifest.out / "course_profile.csv")
    plan = extract_plan(tables, course, m, prm, cfg)
    write_plan_csv(plan, manifest.out / "plan.csv")
    write_json_document(
        {
            "total_time_s": plan.total_time,
            "n_intervals": len(plan.rows),
            "course_length_m": course.total_length,
            "fingerprints": tables.fingerprints,
        },
        manifest.out / "summary.json",
    )
    manifest.write()

    print(f"total_time_s: {plan.total_time:.3f}")
    print(f"intervals: {len(plan.rows)}")
    if args.summary and tables.summary is not None:
        s = tables.summary
        print(f"solve_time_s: {s.seconds:.3f} ({s.n_stages} stages x {s.n_v} x {s.n_w}, {s.workers} workers)")
    return 0


def cmd_simulate(args, config) -> int:
    overrides = {
        "noise_sd": args.noise_sd, "bias": args.bias, "lag": args.lag, "seed": args.seed,
        "baseline_cp": args.baseline_cp or None, "lab_mode": args.lab_mode or None,
    }
    manifest = RunManifest.prepare(
        "simulate", {"tables": args.tables, "rider": args.rider, "course": args.course}, overrides, args.out_dir
    )
    m, prm = _load_rider(args.rider, args.lab_mode)
    tables = import_tables(args.tables)
    course = load_course(args.course, tables.config.dx, int(config["course"]["smoothing_window"]))
    tables.verify(course, m, prm, source=args.tables)

    sim = config["simulation"]
    behavior = RiderBehavior(
        power_bias=args.bias or 0.0, power_noise_sd=args.noise_sd or 0.0,
        response_lag=args.lag or 0.0, seed=args.seed or 0,
    )
    controller = hold_power_controller(m.cp) if args.baseline_cp else None
    result = simulate_ride(
        course, m, prm, tables.config, tables, behavior, controller,
        tick=float(sim["tick_s"]), substep=float(sim["substep_s"]), max_duration=float(sim["max_duration_s"]),
    )
    write_ride_log(result, manifest.out / "ride_log.csv")
    manifest.write()

    print(f"achieved_time_s: {result.achieved_time:.3f}")
    print(f"completed: {str(result.completed).lower()}")
    print(f"clamp_events: {result.clamp_events}")
    print(f"overreach_events: {result.overreach_events}")
    print(f"replans: {result.replans}")
    if result.infeasible_stage is not None:
        raise InfeasiblePlanError("ride stopped without a feasible recommendation", stage=result.infeasible_stage)
    return 0


def cmd_export_plot(args, config) -> int:
    out = Path(args.out)
    manifest = RunManifest.prepare(
        "export-plot", {"plan": args.plan, "baseline": args.baseline}, {"cp": args.cp}, str(out.parent)
    )
    plan = read_plan_csv(args.plan)
    baseline = read_ride_log(args.baseline) if args.baseline else None
    fig = visualizer.create_pacing_comparison(plan, baseline, cp=args.cp)
    visualizer.write_svg(fig, out)
    manifest.write()
    print(f"wrote {out}")
    return 0


def read_ride_log(path: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"unreadable CSV: {e}", source=path)
    if not {"distance_m", "velocity_mps"} <= set(df.columns):
        raise InputError("ride log needs distance_m and velocity_mps columns", source=path)
    return df


def cmd_estimate(args, config) -> int:
    manifest = RunManifest.prepare(
        "estimate", {"ride": args.ride, "rider": args.rider, "course": args.course}, {}, args.out_dir
    )
    m = load_rider_model(args.rider)
    length = None
    if args.course:
        length = load_course(args.course, float(config["solver"]["dx_m"])).total_length
    states = reestimate_ride(read_ride_csv(args.ride), m, course_length=length)
    states.to_csv(manifest.out / "estimated_state.csv", index=False)
    manifest.write()

    last = states.iloc[-1]
    print(f"distance_m: {last['distance_m']:.1f}")
    print(f"remaining_energy_j: {last['remaining_energy_j']:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacer",
        description="Minimum-time pacing plans for cycling time trials",
    )
    parser.add_argument("--config", default=None, help="config.yaml path (default: PACER_CONFIG or bundled)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-cp", help="CP and AWC from a 3-min all-out trace")
    p.add_argument("trace", help="CSV with time_s,power_w[,smo2_pct]")
    p.add_argument("--out-dir", default=".", help="where rider_fragment.json goes")
    p.set_defaults(handler=cmd_fit_cp)

    p = sub.add_parser("fit-recovery", help="recovery line from interval tests")
    p.add_argument("manifest", help="interval-test manifest JSON")
    p.add_argument("--cp", type=positive_float, default=None, help="critical power (W)")
    p.add_argument("--awc", type=positive_float, default=None, help="anaerobic work capacity (J)")
    p.add_argument("--include-negative", action="store_true", help="keep tests with negative recovered energy")
    p.add_argument("--plot", default=None, help="write an SVG of the fit")
    p.set_defaults(handler=cmd_fit_recovery)

    p = sub.add_parser("fit-maxpower", help="max-power curve from a 3-min all-out trace")
    p.add_argument("trace", help="CSV with time_s,power_w")
    p.add_argument("--cp", type=positive_float, required=True, help="critical power (W)")
    p.add_argument("--awc", type=positive_float, required=True, help="anaerobic work capacity (J)")
    p.add_argument("--plot", default=None, help="write an SVG of the fit")
    p.set_defaults(handler=cmd_fit_maxpower)

    p = sub.add_parser("plan", help="solve the pacing problem for a course")
    p.add_argument("--course", required=True, help="course CSV or GPX")
    p.add_argument("--rider", required=True, help="rider JSON")
    p.add_argument("--lab-mode", action="store_true", help="ignore aerodynamic drag")
    p.add_argument("--dx", type=positive_float, default=None, help="interval length (m)")
    p.add_argument("--nv", type=grid_nodes, default=None, help="velocity nodes")
    p.add_argument("--nw", type=grid_nodes, default=None, help="energy nodes")
    p.add_argument("--vmax", type=positive_float, default=None, help="maximum velocity (m/s)")
    p.add_argument("--threads", type=worker_count, default=None, help="solver workers (0 = all cores)")
    p.add_argument("--summary", action="store_true", help="print solver timing")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("simulate", help="closed-loop ride against solved tables")
    p.add_argument("--tables", required=True, help="tables.bin from plan")
    p.add_argument("--rider", required=True, help="rider JSON")
    p.add_argument("--course", required=True, help="course CSV or GPX")
    p.add_argument("--lab-mode", action="store_true", help="ignore aerodynamic drag")
    p.add_argument("--noise-sd", type=non_negative_float, default=None, help="rider power noise (W)")
    p.add_argument("--bias", type=float, default=None, help="rider power bias (W)")
    p.add_argument("--lag", type=non_negative_float, default=None, help="noise response lag (s)")
    p.add_argument("--seed", type=int, default=None, help="noise seed")
    p.add_argument("--baseline-cp", action="store_true", help="hold CP instead of following recommendations")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("export-plot", help="SVG of plan power and velocity vs distance")
    p.add_argument("--plan", required=True, help="plan CSV")
    p.add_argument("--baseline", default=None, help="ride log CSV to overlay")
    p.add_argument("--cp", type=positive_float, default=None, help="draw a CP reference line (W)")
    p.add_argument("--out", default="pacing.svg", help="SVG path")
    p.set_defaults(handler=cmd_export_plot)

    p = sub.add_parser("estimate", help="re-estimate distance and energy from a recorded ride")
    p.add_argument("--ride", required=True, help="CSV with time_s,power_w,velocity_mps[,smo2_pct]")
    p.add_argument("--rider", required=True, help="rider JSON")
    p.add_argument("--course", default=None, help="course file, caps distance at its length")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.set_defaults(handler=cmd_estimate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config)
    except PacerError as e:
        configure_logging("ERROR")
        logger.error("%s", e)
        return e.exit_code

    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else config["logging"]["level"]
    configure_logging(level, config["logging"].get("format"))

    try:
        return args.handler(args, config)
    except PacerError as e:
        logger.error("%s", e)
        return e.exit_code
    except ValueError as e:
        logger.error("invalid argument: %s", e)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
