"""Run configuration (JSON) and result persistence (CSV + JSON summary)."""

import json
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .scenarios import (KAPPA_GAIN, KAPPA_PLAN, KP_Q, KP_QT, KP_R, TRACK_Q, TRACK_QT,
                        TRACK_R, PRESETS)
from .trajopt import Plan

CONTROLLERS = ("open_loop", "lqr", "kp_lqr")
PLANNERS = ("sp", "mp")

_DEFAULT_TASKS = {
    "ball1d": {"goal": [0.4], "horizon": 10},
    "planar": {"goal": [0.2, 0.0, 0.0], "horizon": 12},
}


@dataclass
class RunConfig:
    scenario: str = "planar_push_a"
    scenario_options: dict = field(default_factory=dict)
    goal: Optional[list] = None
    horizon: Optional[int] = None
    x0: Optional[list] = None
    planner: str = "sp"
    particles: Optional[list] = None  # radii (m) for MP planning
    weights: dict = field(default_factory=lambda: {
        "Q": list(TRACK_Q), "R": list(TRACK_R), "QT": list(TRACK_QT)})
    kp_weights: dict = field(default_factory=lambda: {
        "Q": list(KP_Q), "R": list(KP_R), "QT": list(KP_QT)})
    kappa_plan: float = KAPPA_PLAN
    kappa_gain: float = KAPPA_GAIN
    kappa_list: list = field(default_factory=lambda: [160.0, 800.0])
    controller: str = "lqr"
    perturbation: dict = field(default_factory=lambda: {
        "kind": "initial_pose", "bounds": [0.025, 0.025, math.radians(5.0)], "samples": 50})
    plant: str = "exact"
    substeps: int = 4
    trajopt: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    out: str = "out"
    plan_file: Optional[str] = None

    def to_dict(self):
        return asdict(self)


_TRAJOPT_KEYS = {"tol", "min_decrease", "max_iters", "armijo", "backtrack", "max_backtracks",
                 "initial_step", "robust", "softmax_lambda", "nominal_index"}
_NESTED = {
    "weights": {"Q", "R", "QT"},
    "kp_weights": {"Q", "R", "QT"},
    "perturbation": {"kind", "bounds", "samples"},
    "trajopt": _TRAJOPT_KEYS,
}


def _line_of(text, key):
    """1-based line of the first occurrence of ``"key"`` in `text`, or None."""
    if text is None:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _fail(msg, text=None, key=None):
    line = _line_of(text, key) if key is not None else None
    where = ""
    if line is not None:
        src = text.splitlines()[line - 1].strip()
        where = f" (line {line}: {src})"
    raise ConfigurationError(msg + where)


def _defaults_for(scenario):
    return _DEFAULT_TASKS["ball1d" if scenario == "ball1d" else "planar"]


def config_from_dict(data, text=None):
    """Validate a parsed mapping into a fully defaulted :class:`RunConfig`."""
    if not isinstance(data, dict):
        _fail("config must be a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    for key in data:
        if key not in known:
            _fail(f"unknown config key {key!r}", text, key)
    base = RunConfig()
    merged = {}
    for key in known:
        default = getattr(base, key)
        val = data.get(key, default)
        if key in _NESTED and key in data:
            if not isinstance(val, dict):
                _fail(f"{key} must be an object", text, key)
            for sub in val:
                if sub not in _NESTED[key]:
                    _fail(f"unknown key {sub!r} in {key}", text, sub)
            if isinstance(default, dict):
                val = {**default, **val}
        merged[key] = val
    cfg = RunConfig(**merged)
    if cfg.scenario not in PRESETS:
        _fail(f"unknown scenario {cfg.scenario!r}; known: {sorted(PRESETS)}", text, "scenario")
    task = _defaults_for(cfg.scenario)
    if cfg.goal is None:
        cfg.goal = list(task["goal"])
    if cfg.horizon is None:
        cfg.horizon = task["horizon"]
    for key in ("kappa_plan", "kappa_gain"):
        v = getattr(cfg, key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            _fail(f"{key} must be a positive number, got {v!r}", text, key)
        setattr(cfg, key, float(v))
    if not cfg.kappa_list or any(not (isinstance(k, (int, float)) and k > 0)
                                 for k in cfg.kappa_list):
        _fail("kappa_list must be a non-empty list of positive numbers", text, "kappa_list")
    cfg.kappa_list = [float(k) for k in cfg.kappa_list]
    if cfg.controller not in CONTROLLERS:
        _fail(f"controller must be one of {CONTROLLERS}", text, "controller")
    if cfg.planner not in PLANNERS:
        _fail(f"planner must be one of {PLANNERS}", text, "planner")
    if cfg.plant not in ("exact", "smoothed"):
        _fail("plant must be 'exact' or 'smoothed'", text, "plant")
    for key, lo in (("substeps", 1), ("threads", 1), ("horizon", 1)):
        v = getattr(cfg, key)
        if not isinstance(v, int) or isinstance(v, bool) or v < lo:
            _fail(f"{key} must be an integer >= {lo}", text, key)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2 ** 64:
        _fail("seed must be an unsigned 64-bit integer", text, "seed")
    p = cfg.perturbation
    if p["kind"] not in ("initial_pose", "shape_radius"):
        _fail("perturbation.kind must be 'initial_pose' or 'shape_radius'", text, "kind")
    if "bounds" not in data.get("perturbation", {}) and p["kind"] == "shape_radius":
        p["bounds"] = [0.01]
    if "samples" not in data.get("perturbation", {}) and p["kind"] == "shape_radius":
        p["samples"] = 20
    if any(not (isinstance(b, (int, float)) and b >= 0) for b in np.atleast_1d(p["bounds"])):
        _fail("perturbation bounds must be >= 0", text, "bounds")
    if not isinstance(p["samples"], int) or p["samples"] < 0:
        _fail("perturbation.samples must be a non-negative integer", text, "samples")
    if cfg.particles is not None and (
            not cfg.particles or any(not (isinstance(r, (int, float)) and r > 0)
                                     for r in cfg.particles)):
        _fail("particles must be a non-empty list of positive radii", text, "particles")
    return cfg


def load_config(path):
    """Parse and validate a JSON run configuration."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        src = lines[exc.lineno - 1].strip() if 0 < exc.lineno <= len(lines) else ""
        raise ConfigurationError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            f" ({src})") from exc
    return config_from_dict(data, text)


# -- reports --------------------------------------------------------------------------

def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=os.path.dirname(os.path.abspath(__file__)),
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _perturbation_columns(kind):
    return ["dr"] if kind == "shape_radius" else ["dx", "dy", "dtheta"]


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def save_report(reports, out_dir, *, baseline=None, config=None, extra=None):
    """Write ``<name>.csv`` per report and one ``summary.json``.

    `reports` maps names to SweepReports (a single report is named
    ``sweep``).  With two or more reports, eta of each against `baseline`
    (default: the first name) is included.  Returns the written paths.
    """
    from .rollout import SweepReport, eta

    if isinstance(reports, SweepReport):
        reports = {"sweep": reports}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    summary = {"git_describe": git_describe(), "reports": {}}
    for name, rep in reports.items():
        cols = _perturbation_columns(rep.meta.get("kind", "initial_pose"))
        lines = [",".join(["sample_id"] + cols + ["pos_err_m", "ang_err_rad", "success"])]
        for r in rep.records:
            vals = [r["sample_id"]] + list(r["perturbation"]) + [r["pos_err"], r["ang_err"],
                                                                 r["success"]]
            lines.append(",".join(_fmt(v) for v in vals))
        p = out / f"{name}.csv"
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
        summary["reports"][name] = {**rep.summary(), "meta": rep.meta}
    names = list(reports)
    if len(names) >= 2:
        base = baseline or names[0]
        if base not in reports:
            raise ConfigurationError(f"baseline {base!r} is not among the reports")
        etas = {}
        for name in names:
            if name == base:
                continue
            try:
                etas[f"{name}/{base}"] = eta(reports[name], reports[base])
            except ConfigurationError:
                etas[f"{name}/{base}"] = None
        summary["eta"] = etas
        summary["baseline"] = base
    if config is not None:
        summary["config"] = config.to_dict() if hasattr(config, "to_dict") else config
    if extra:
        summary.update(extra)
    p = out / "summary.json"
    write_json(p, summary)
    paths.append(p)
    return paths


def load_summary(path):
    return json.loads(Path(path).read_text())


# -- plans ----------------------------------------------------------------------------

def save_plan(plan, path):
    write_json(path, {
        "x_opt": plan.x_opt, "v_opt": plan.v_opt, "goal": plan.goal,
        "converged": bool(plan.converged), "final_cost": plan.final_cost,
        "initial_cost": plan.initial_cost, "iterations": plan.iterations,
    })


def load_plan(path):
    try:
        d = json.loads(Path(path).read_text())
        return Plan(np.array(d["x_opt"], dtype=float), np.array(d["v_opt"], dtype=float),
                    np.array(d["goal"], dtype=float), bool(d["converged"]),
                    float(d["final_cost"]), iterations=int(d.get("iterations", 0)),
                    initial_cost=float(d.get("initial_cost", float("nan"))))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: not a plan file ({exc})") from exc
