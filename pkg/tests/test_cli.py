import json

import numpy as np
import pandas as pd
import pytest

from cli import MANIFEST_NAME, main
from visualizations import PacingVisualizer

SUB9 = {
    "cp_w": 234.0, "awc_j": 9758.0, "rec_a": 0.8, "rec_b": 40.0, "mp_a1": -2e-6, "mp_a2": 0.08,
    "vmax_mps": 16.0, "mass_kg": 80.0, "g": 9.81, "crr": 0.004, "cda_m2": 0.25, "rho_kgm3": 1.225,
    "lab_mode": False,
}


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("PACER_CONFIG", raising=False)
    monkeypatch.setenv("PACER_THREADS", "1")


@pytest.fixture
def flat_course(tmp_path):
    path = tmp_path / "flat.csv"
    path.write_text("distance_m,elevation_m\n0,0\n10300,0\n")
    return path


def _rider(tmp_path, name="rider.json", **overrides):
    path = tmp_path / name
    path.write_text(json.dumps({**SUB9, **overrides}))
    return path


def _output(capsys):
    values = {}
    for line in capsys.readouterr().out.splitlines():
        key, _, value = line.partition(": ")
        values[key] = value
    return values


@pytest.fixture
def fake_svg(monkeypatch):
    """Skip kaleido; record which figures would have been written"""
    written = []

    def write_svg(self, fig, path):
        written.append(fig)
        with open(path, "w") as f:
            f.write("<svg/>")

    monkeypatch.setattr(PacingVisualizer, "write_svg", write_svg)
    return written


def test_fit_cp(tmp_path, data_dir, capsys):
    code = main(["fit-cp", str(data_dir / "three_min_all_out.csv"), "--out-dir", str(tmp_path)])
    assert code == 0
    out = _output(capsys)
    assert float(out["cp_w"]) == 234.0
    assert float(out["awc_j"]) == 21960.0
    fragment = json.loads((tmp_path / "rider_fragment.json").read_text())
    assert fragment == {"awc_j": 21960.0, "cp_w": 234.0}
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert manifest["subcommand"] == "fit-cp"
    assert manifest["inputs"]["trace"].endswith("three_min_all_out.csv")


def test_fit_cp_prints_full_precision(tmp_path, write_trace, capsys):
    t = np.arange(180.0)
    trace = write_trace("big.csv", t, np.where(t < 60, 234.0 + 20576.125, 234.0))
    assert main(["fit-cp", str(trace), "--out-dir", str(tmp_path)]) == 0
    out = _output(capsys)
    assert "e" not in out["awc_j"]
    assert float(out["awc_j"]) == pytest.approx(1234567.5, abs=1e-6)


def test_fit_recovery(tmp_path, write_trace, capsys, fake_svg):
    t = np.arange(100)
    write_trace("fatigue.csv", t, np.full(100, 234.0 + 48.79))
    write_trace("final_80.csv", t, np.full(100, 234.0 + 60.79))
    write_trace("final_150.csv", t, np.full(100, 234.0 + 54.79))
    manifest = tmp_path / "tests.json"
    manifest.write_text(json.dumps({
        "cp_w": 234.0,
        "awc_j": 9758.0,
        "tests": [
            {"fatigue_trace": "fatigue.csv", "recovery_power_w": 80, "recovery_duration_s": 120,
             "final_mao_trace": "final_80.csv"},
            {"fatigue_trace": "fatigue.csv", "recovery_power_w": 150, "recovery_duration_s": 120,
             "final_mao_trace": "final_150.csv"},
        ],
    }))
    plot = tmp_path / "recovery.svg"
    assert main(["fit-recovery", str(manifest), "--plot", str(plot)]) == 0
    out = _output(capsys)
    # adjusted powers 224 W at 80 W and 229 W at 150 W
    assert float(out["rec_a"]) == pytest.approx(5.0 / 70.0, rel=1e-5)
    assert float(out["rec_b"]) == pytest.approx(224.0 - 80.0 * 5.0 / 70.0, rel=1e-5)
    assert out["n_points"] == "2"
    assert plot.exists()
    assert len(fake_svg) == 1


def test_fit_maxpower(data_dir, tmp_path, capsys, fake_svg):
    trace = str(data_dir / "three_min_all_out.csv")
    plot = tmp_path / "maxpower.svg"
    assert main(["fit-maxpower", trace, "--cp", "234", "--awc", "21960", "--plot", str(plot)]) == 0
    out = _output(capsys)
    assert {"mp_a1", "mp_a2", "residual_rms_w", "r_squared", "n_points"} <= set(out)
    assert out["n_points"] == "180"
    assert plot.exists()


def test_fit_maxpower_requires_cp(data_dir):
    assert main(["fit-maxpower", str(data_dir / "three_min_all_out.csv")]) == 2


def test_plan_flat_course(tmp_path, flat_course, data_dir, capsys):
    out_dir = tmp_path / "out"
    code = main([
        "plan", "--course", str(flat_course), "--rider", str(data_dir / "sub9_rider.json"),
        "--nv", "8", "--nw", "10", "--summary", "--out-dir", str(out_dir),
    ])
    assert code == 0
    out = _output(capsys)
    assert out["intervals"] == "103"
    assert "solve_time_s" in out

    plan = pd.read_csv(out_dir / "plan.csv")
    assert len(plan) == 103
    assert list(plan.columns) == [
        "distance_m", "target_power_w", "velocity_mps", "remaining_energy_j", "elapsed_time_s",
    ]
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["n_intervals"] == 103
    assert summary["course_length_m"] == 10300.0
    assert float(out["total_time_s"]) == pytest.approx(summary["total_time_s"], abs=1e-3)
    assert set(summary["fingerprints"]) == {"config", "model", "physics", "course", "combined"}
    for name in ("tables.bin", "course_profile.csv", MANIFEST_NAME):
        assert (out_dir / name).exists()


def test_plan_outputs_are_byte_identical(tmp_path, flat_course, data_dir):
    rider = str(data_dir / "sub9_rider.json")
    for run, threads in (("a", "1"), ("b", "3")):
        args = ["plan", "--course", str(flat_course), "--rider", rider, "--nv", "8", "--nw", "10"]
        assert main(args + ["--threads", threads, "--out-dir", str(tmp_path / run)]) == 0
    for name in ("tables.bin", "plan.csv", "summary.json", "course_profile.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plan_then_simulate(tmp_path, flat_course, data_dir, capsys):
    rider = str(data_dir / "sub9_rider.json")
    plan_dir = tmp_path / "plan"
    assert main(["plan", "--course", str(flat_course), "--rider", rider, "--out-dir", str(plan_dir)]) == 0
    total = json.loads((plan_dir / "summary.json").read_text())["total_time_s"]
    capsys.readouterr()

    sim_dir = tmp_path / "sim"
    code = main([
        "simulate", "--tables", str(plan_dir / "tables.bin"), "--rider", rider, "--course", str(flat_course),
        "--noise-sd", "0", "--out-dir", str(sim_dir),
    ])
    assert code == 0
    out = _output(capsys)
    assert out["completed"] == "true"
    assert float(out["achieved_time_s"]) == pytest.approx(total, rel=0.02)
    assert out["replans"] == "0"
    log = pd.read_csv(sim_dir / "ride_log.csv")
    assert log["distance_m"].iloc[-1] == 10300.0

    assert main([
        "simulate", "--tables", str(plan_dir / "tables.bin"), "--rider", rider, "--course", str(flat_course),
        "--baseline-cp", "--out-dir", str(tmp_path / "baseline"),
    ]) == 0
    baseline = _output(capsys)
    assert float(baseline["achieved_time_s"]) > float(out["achieved_time_s"])


def test_simulate_with_other_rider_is_fingerprint_mismatch(tmp_path, flat_course, data_dir):
    plan_dir = tmp_path / "plan"
    args = ["plan", "--course", str(flat_course), "--rider", str(data_dir / "sub9_rider.json"), "--nv", "6", "--nw", "8"]
    assert main(args + ["--out-dir", str(plan_dir)]) == 0
    code = main([
        "simulate", "--tables", str(plan_dir / "tables.bin"), "--rider", str(_rider(tmp_path, cp_w=250.0)),
        "--course", str(flat_course), "--out-dir", str(tmp_path / "sim"),
    ])
    assert code == 5


def test_infeasible_course_exit_code(tmp_path):
    course = tmp_path / "wall.csv"
    course.write_text("distance_m,elevation_m\n0,0\n200,0\n1200,100\n")
    config = tmp_path / "config.yaml"
    config.write_text("solver:\n  v_min_mps: 8.0\n")
    code = main([
        "--config", str(config), "plan", "--course", str(course), "--rider", str(_rider(tmp_path, awc_j=2000.0)),
        "--vmax", "12", "--nv", "3", "--nw", "10", "--out-dir", str(tmp_path / "out"),
    ])
    assert code == 4


def test_export_plot(tmp_path, flat_course, data_dir, fake_svg):
    plan_dir = tmp_path / "plan"
    args = ["plan", "--course", str(flat_course), "--rider", str(data_dir / "sub9_rider.json"), "--nv", "6", "--nw", "8"]
    assert main(args + ["--out-dir", str(plan_dir)]) == 0

    out = tmp_path / "plots" / "pacing.svg"
    assert main(["export-plot", "--plan", str(plan_dir / "plan.csv"), "--cp", "234", "--out", str(out)]) == 0
    assert out.exists()
    assert (out.parent / MANIFEST_NAME).exists()
    fig = fake_svg[-1]
    assert [trace.name for trace in fig.data] == ["Optimal power", "Optimal velocity", "Optimal energy"]


def test_estimate(tmp_path, data_dir, capsys):
    ride = tmp_path / "ride.csv"
    t = np.arange(21)
    pd.DataFrame({"time_s": t, "power_w": 334.0, "velocity_mps": 5.0}).to_csv(ride, index=False)
    out_dir = tmp_path / "out"
    code = main(["estimate", "--ride", str(ride), "--rider", str(data_dir / "sub9_rider.json"), "--out-dir", str(out_dir)])
    assert code == 0
    out = _output(capsys)
    assert out["distance_m"] == "100.0"
    assert out["remaining_energy_j"] == "7758.0"
    states = pd.read_csv(out_dir / "estimated_state.csv")
    assert len(states) == 21
    manifest = json.loads((out_dir / MANIFEST_NAME).read_text())
    assert manifest["subcommand"] == "estimate"
    assert set(manifest["inputs"]) == {"ride", "rider"}


def test_unknown_flag_is_usage_error():
    assert main(["plan", "--bogus"]) == 2


def test_missing_subcommand_is_usage_error():
    assert main([]) == 2


def test_missing_input_file(tmp_path):
    assert main(["fit-cp", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 3


def test_bad_config_file(tmp_path, data_dir):
    config = tmp_path / "config.yaml"
    config.write_text("solver: [unclosed\n")
    assert main(["--config", str(config), "fit-cp", str(data_dir / "three_min_all_out.csv")]) == 3


@pytest.mark.parametrize(
    "flags",
    [
        ["--threads", "-1"],
        ["--nv", "1"],
        ["--nw", "1"],
        ["--dx", "0"],
        ["--vmax", "nan"],
        ["--nv", "many"],
        ["--vmax", "0.2"],
    ],
)
def test_bad_solver_flags_are_usage_errors(tmp_path, flat_course, data_dir, flags):
    code = main([
        "plan", "--course", str(flat_course), "--rider", str(data_dir / "sub9_rider.json"),
        *flags, "--out-dir", str(tmp_path),
    ])
    assert code == 2


def test_negative_pacer_threads_is_input_error(tmp_path, flat_course, data_dir, monkeypatch):
    monkeypatch.setenv("PACER_THREADS", "-2")
    code = main([
        "plan", "--course", str(flat_course), "--rider", str(data_dir / "sub9_rider.json"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 3
