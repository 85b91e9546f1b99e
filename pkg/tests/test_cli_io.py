import json
import subprocess
import sys

import numpy as np
import pytest

from csc import cli, io
from csc.errors import ConfigurationError, NonConvergenceError
from csc.rollout import SweepReport
from csc.scenarios import TRACK_Q, TRACK_QT, TRACK_R

FAST = {"scenario": "ball1d", "horizon": 5, "trajopt": {"max_iters": 5},
        "perturbation": {"kind": "initial_pose", "bounds": [0.01], "samples": 3}}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


# -- RunConfig ---------------------------------------------------------------------------

def test_minimal_config_is_fully_defaulted():
    cfg = io.config_from_dict({"scenario": "planar_push_a"})
    assert cfg.kappa_gain == 800.0 and cfg.kappa_plan == 1e5
    assert cfg.goal == [0.2, 0.0, 0.0] and cfg.horizon == 12
    assert cfg.kappa_list == [160.0, 800.0]
    assert cfg.perturbation["samples"] == 50
    assert cfg.weights == {"Q": list(TRACK_Q), "R": list(TRACK_R), "QT": list(TRACK_QT)}


def test_nine_entry_weights_accepted_verbatim(tmp_path):
    data = {"scenario": "planar_push_a", "weights": {
        "Q": [10, 10, 10, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], "R": [5] * 6,
        "QT": [1000, 1000, 1000, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]}}
    cfg = io.load_config(write(tmp_path, data))
    scene, _ = cli._scene(cfg)
    W = cli._weights(cfg, scene)
    np.testing.assert_allclose(np.diag(W.QT), [1000] * 3 + [0.1] * 4)


def test_shape_perturbation_defaults():
    cfg = io.config_from_dict({"perturbation": {"kind": "shape_radius"}})
    assert cfg.perturbation["bounds"] == [0.01] and cfg.perturbation["samples"] == 20


@pytest.mark.parametrize("data", [
    {"kappa_gain": -800}, {"kappa_plan": 0}, {"controller": "mpc"}, {"planner": "ilqr"},
    {"substeps": 0}, {"seed": -1}, {"scenario": "box"}, {"kappa_list": []},
    {"perturbation": {"kind": "mass"}}, {"perturbation": {"samples": 2.5}},
    {"particles": [0.1, -0.1]}, {"plant": "drake"}, {"weights": [1, 2]},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigurationError):
        io.config_from_dict(data)


def test_unknown_keys_name_their_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "scenario": "ball1d",\n  "kapa_gain": 5\n}\n')
    with pytest.raises(ConfigurationError, match="line 3"):
        io.load_config(p)
    p.write_text('{\n  "weights": {"Q": [1], "S": [2]}\n}\n')
    with pytest.raises(ConfigurationError, match="'S'"):
        io.load_config(p)


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "scenario": "ball1d",\n  "seed": 1,\n}\n')
    with pytest.raises(ConfigurationError, match="line 4"):
        io.load_config(p)


# -- reports -----------------------------------------------------------------------------

def rep(errs, kind="initial_pose"):
    pert = (0.01, -0.02, 0.001) if kind == "initial_pose" else (0.004,)
    return SweepReport([{"sample_id": i, "perturbation": pert, "pos_err": e,
                         "ang_err": 0.5 * e, "success": True} for i, e in enumerate(errs)],
                       {"kind": kind, "seed": 0})


def test_empty_report(tmp_path):
    io.save_report(SweepReport([], {"kind": "initial_pose"}), tmp_path)
    assert (tmp_path / "sweep.csv").read_text() == (
        "sample_id,dx,dy,dtheta,pos_err_m,ang_err_rad,success\n")
    s = io.load_summary(tmp_path / "summary.json")
    assert s["reports"]["sweep"]["delta_defined"] is False
    assert s["reports"]["sweep"]["delta_pos_m"] is None


def test_two_reports_emit_eta(tmp_path):
    io.save_report({"open_loop": rep([0.3]), "lqr": rep([0.046])}, tmp_path)
    s = io.load_summary(tmp_path / "summary.json")
    assert s["baseline"] == "open_loop"
    assert s["eta"]["lqr/open_loop"] == pytest.approx(0.046 / 0.3)
    with pytest.raises(ConfigurationError):
        io.save_report({"a": rep([0.1]), "b": rep([0.2])}, tmp_path, baseline="c")


def test_shape_csv_columns(tmp_path):
    io.save_report({"s": rep([0.1, 0.2], "shape_radius")}, tmp_path)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "sample_id,dr,pos_err_m,ang_err_rad,success"
    assert lines[1] == "0,0.004,0.1,0.05,1"


def test_reports_are_byte_stable_and_round_trip(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = io.config_from_dict({})
    for d in (a, b):
        io.save_report({"x": rep([0.1, 1 / 3])}, d, config=cfg)
    for name in ("x.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    s = io.load_summary(a / "summary.json")
    io.write_json(tmp_path / "again.json", s)
    assert io.load_summary(tmp_path / "again.json") == s
    assert s["reports"]["x"]["delta_pos_m"] == pytest.approx((0.1 + 1 / 3) / 2)


# -- CLI -----------------------------------------------------------------------------

def run(argv, env=None, capsys=None):
    code = cli.main(argv, env or {})
    out = capsys.readouterr() if capsys else None
    return code, out


def test_demo_unilateral(tmp_path, capsys):
    code, out = run(["demo-unilateral", "--out", str(tmp_path)], capsys=capsys)
    assert code == 0
    assert "push" in out.out and "pull" in out.out and "PASS" in out.out
    assert io.load_summary(tmp_path / "summary.json")["passed"] is True


def test_gradcheck_verb(tmp_path, capsys):
    code, out = run(["gradcheck", "--kappa", "800", "--out", str(tmp_path)], capsys=capsys)
    assert code == 0
    assert "planar_push_a" in out.out
    s = io.load_summary(tmp_path / "summary.json")
    assert s["passed"] and s["kappa"] == 800.0


def test_sweep_pair_and_determinism(tmp_path, capsys):
    cfg = write(tmp_path, FAST)
    outs = {}
    for ctl in ("open_loop", "lqr"):
        d = tmp_path / ctl
        assert run(["sweep", "--config", str(cfg), "--controller", ctl, "--out", str(d)],
                   capsys=capsys)[0] == 0
        outs[ctl] = io.load_summary(d / "summary.json")
        assert (d / f"{ctl}.csv").exists()
    assert outs["lqr"]["reports"]["lqr"]["meta"]["controller"] == "lqr"
    again = tmp_path / "again"
    run(["sweep", "--config", str(cfg), "--controller", "lqr", "--out", str(again)],
        capsys=capsys)
    assert (again / "lqr.csv").read_bytes() == (tmp_path / "lqr" / "lqr.csv").read_bytes()


def test_plan_gains_rollout_verbs(tmp_path, capsys):
    cfg = write(tmp_path, FAST)
    for verb in ("plan", "gains", "rollout"):
        code, _ = run([verb, "--config", str(cfg), "--out", str(tmp_path / verb)],
                      capsys=capsys)
        assert code == 0, verb
    plan = io.load_plan(tmp_path / "plan" / "plan.json")
    assert plan.T == 5
    g = json.loads((tmp_path / "gains" / "gains.json").read_text())
    assert np.array(g["K_seq"]).shape == (5, 1, 2)
    assert (tmp_path / "rollout" / "rollout.csv").read_text().startswith("tick,x0,x1")
    # a saved plan can be fed back in
    data = dict(FAST, plan_file=str(tmp_path / "plan" / "plan.json"))
    code, _ = run(["rollout", "--config", str(write(tmp_path, data, "p.json")),
                   "--out", str(tmp_path / "r2")], capsys=capsys)
    assert code == 0


def test_kappa_study_verb(tmp_path, capsys):
    data = dict(FAST, kappa_list=[160, 800])
    code, out = run(["kappa-study", "--config", str(write(tmp_path, data)),
                     "--out", str(tmp_path)], capsys=capsys)
    assert code == 0 and "kappa_160" in out.out
    s = io.load_summary(tmp_path / "summary.json")
    assert set(s["reports"]) == {"kappa_160", "kappa_800"} and "eta" in s


def test_kp_lqr_needs_planar_scene(tmp_path, capsys):
    code, out = run(["gains", "--config", str(write(tmp_path, FAST)), "--controller",
                     "kp_lqr", "--out", str(tmp_path)], capsys=capsys)
    assert code == 2 and "SE(2)" in out.err


def test_validation_exit_code(tmp_path, capsys):
    bad = write(tmp_path, {"kappa_gain": -1})
    code, out = run(["sweep", "--config", str(bad)], capsys=capsys)
    assert code == 2 and "kappa_gain" in out.err
    assert run(["plan", "--config", str(tmp_path / "missing.json")], capsys=capsys)[0] == 2


def test_numerical_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NonConvergenceError("injected")

    monkeypatch.setattr(cli, "unilateral_demo", boom)
    code, out = run(["demo-unilateral", "--out", str(tmp_path)], capsys=capsys)
    assert code == 3 and "injected" in out.err


def test_flag_overrides_and_thread_env(tmp_path):
    args = cli._parser().parse_args(["sweep", "--seed", "9", "--kappa-gain", "160",
                                     "--out", str(tmp_path)])
    cfg = cli.resolve_config(args, {"CSC_THREADS": "2"})
    assert cfg.seed == 9 and cfg.kappa_gain == 160.0 and cfg.threads == 2
    args = cli._parser().parse_args(["sweep", "--threads", "3"])
    assert cli.resolve_config(args, {"CSC_THREADS": "2"}).threads == 3
    with pytest.raises(ConfigurationError):
        cli.resolve_config(cli._parser().parse_args(["sweep"]), {"CSC_THREADS": "many"})


def test_config_file_not_mutated(tmp_path, capsys):
    cfg = write(tmp_path, FAST)
    before = cfg.read_bytes()
    run(["plan", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")],
        capsys=capsys)
    assert cfg.read_bytes() == before


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "csc", "--help"], capture_output=True,
                         text=True, check=True)
    assert "demo-unilateral" in out.stdout
