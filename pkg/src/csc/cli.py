"""Command-line entry point: ``python -m csc <verb> [flags]``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .dynamics import ShapeParam, finite_diff_linearize, linearize, max_relative_error
from .errors import ConfigurationError, CscError
from .lqr import KeypointSet, gains_along_plan, kp_lqr, kp_weights, linearize_plan
from .rollout import (PerturbationSpec, build_foh, closed_loop_rollout, kappa_study,
                      run_sweep, terminal_error, unilateral_demo)
from .scenarios import PRESETS, load_preset
from .trajopt import (CostWeights, TrajOptOptions, constraints_for, generate_reference,
                      mp_trajopt, sp_trajopt)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
GRADCHECK_TOL = 1e-4

VERBS = ("plan", "gains", "rollout", "sweep", "kappa-study", "demo-unilateral", "gradcheck")


def _parser():
    p = argparse.ArgumentParser(prog="csc", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--controller", choices=io.CONTROLLERS)
    p.add_argument("--kappa-plan", type=float, metavar="F")
    p.add_argument("--kappa-gain", type=float, metavar="F")
    p.add_argument("--kappa", type=float, metavar="F", help="smoothing for gradcheck")
    p.add_argument("--threads", type=int, metavar="N",
                   help="worker threads (fallback: $CSC_THREADS)")
    return p


def resolve_config(args, env=None):
    """Config file (or defaults) with command-line overrides applied."""
    env = os.environ if env is None else env
    data = {}
    text = None
    if args.config:
        cfg = io.load_config(args.config)
        data = cfg.to_dict()
    overrides = {"out": args.out, "seed": args.seed, "controller": args.controller,
                 "kappa_plan": args.kappa_plan, "kappa_gain": args.kappa_gain}
    threads = args.threads
    if threads is None and env.get("CSC_THREADS"):
        try:
            threads = int(env["CSC_THREADS"])
        except ValueError as exc:
            raise ConfigurationError(f"CSC_THREADS must be an integer: {exc}") from exc
    overrides["threads"] = threads
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return io.config_from_dict(data, text)


# -- pipeline pieces --------------------------------------------------------------

def _scene(cfg):
    opts = dict(cfg.scenario_options)
    opts.setdefault("kappa", cfg.kappa_plan)
    return load_preset(cfg.scenario, opts)


def _weights(cfg, scene):
    w = cfg.weights
    return CostWeights.from_diagonals(w["Q"], w["R"], w["QT"], scene.n_u, scene.n_a)


def _task(cfg, scene, spec):
    x0 = np.array(cfg.x0 if cfg.x0 is not None else spec.x0, dtype=float)
    if x0.shape != (scene.n_x,):
        raise ConfigurationError(f"x0 must have {scene.n_x} entries")
    return generate_reference(spec, x0, np.array(cfg.goal, dtype=float), cfg.horizon)


def make_plan(cfg, scene, spec, log=print):
    if cfg.plan_file:
        return io.load_plan(cfg.plan_file)
    ref = _task(cfg, scene, spec)
    opts = TrajOptOptions(kappa=cfg.kappa_plan, constraints=constraints_for(
        spec, scene.n_u, scene.n_a), threads=cfg.threads, **cfg.trajopt)
    weights = _weights(cfg, scene)
    if cfg.planner == "mp":
        radii = cfg.particles or [spec.object["radius"]]
        plan = mp_trajopt(scene.with_params, [ShapeParam(r) for r in radii], ref, weights,
                          opts)
    else:
        plan = sp_trajopt(scene, None, ref, weights, opts)
    log(f"plan: T={plan.T} iterations={plan.iterations} converged={plan.converged} "
        f"cost {plan.initial_cost:.6g} -> {plan.final_cost:.6g}")
    return plan


def make_gains(cfg, scene, spec, plan, kappa=None):
    kappa = cfg.kappa_gain if kappa is None else kappa
    if cfg.controller == "open_loop":
        return None
    if cfg.controller == "lqr":
        return gains_along_plan(scene, plan, _weights(cfg, scene), kappa)
    if spec.dimensionality != "SE2":
        raise ConfigurationError("kp_lqr needs an SE(2) object")
    kps = KeypointSet.rim(spec.object["radius"])
    A_seq, B_seq = linearize_plan(scene, plan, kappa)
    w = cfg.kp_weights
    return kp_lqr(A_seq, B_seq, plan.x_opt[:, : scene.n_u], kps,
                  kp_weights(scene.n_u, scene.n_a, kps.n_p, w["Q"], w["R"], w["QT"]))


def _perturbation(cfg):
    p = cfg.perturbation
    return PerturbationSpec(p["kind"], tuple(p["bounds"]), p["samples"], cfg.seed)


def _plant_opts(cfg):
    return {"kind": cfg.plant, "substeps": cfg.substeps}


# -- verbs ----------------------------------------------------------------------------

def cmd_plan(cfg, out, log):
    scene, spec = _scene(cfg)
    plan = make_plan(cfg, scene, spec, log)
    io.save_plan(plan, out / "plan.json")
    n_u = scene.n_u
    pos, ang = terminal_error(plan.x_opt[-1, :n_u], plan.goal[:n_u])
    io.write_json(out / "summary.json", {
        "verb": "plan", "converged": plan.converged, "iterations": plan.iterations,
        "initial_cost": plan.initial_cost, "final_cost": plan.final_cost,
        "terminal_pos_err_m": pos, "terminal_ang_err_rad": ang,
        "git_describe": io.git_describe(), "config": cfg.to_dict()})
    log(f"terminal error: {pos:.4f} m, {ang:.4f} rad")
    return EXIT_OK


def cmd_gains(cfg, out, log):
    scene, spec = _scene(cfg)
    plan = make_plan(cfg, scene, spec, log)
    gains = make_gains(cfg, scene, spec, plan)
    if gains is None:
        raise ConfigurationError("the open_loop controller has no gains")
    io.write_json(out / "gains.json", {
        "layout": gains.state_layout, "n_x": gains.n_x, "K_seq": gains.K_seq,
        "P_0": gains.P_seq[0], "kappa_gain": cfg.kappa_gain})
    norms = [float(np.abs(K).max()) for K in gains.K_seq]
    log(f"gains: T={gains.T} layout={gains.state_layout} max|K_t| = "
        + " ".join(f"{v:.3g}" for v in norms))
    return EXIT_OK


def cmd_rollout(cfg, out, log):
    scene, spec = _scene(cfg)
    plan = make_plan(cfg, scene, spec, log)
    gains = make_gains(cfg, scene, spec, plan)
    ctrl = build_foh(plan, gains, scene.h, scene.n_u)
    res = closed_loop_rollout(scene, ctrl, plan.x_opt[0], cfg.substeps, kind=cfg.plant,
                              v_bounds=spec.v_bounds, workspace=spec.workspace)
    cols = [f"x{i}" for i in range(scene.n_x)]
    lines = [",".join(["tick"] + cols)]
    lines += [",".join([str(k)] + [repr(float(v)) for v in x]) for k, x in enumerate(res.xs)]
    (out / "rollout.csv").write_text("\n".join(lines) + "\n")
    pos, ang = terminal_error(res.terminal[: scene.n_u], plan.goal[: scene.n_u])
    io.write_json(out / "summary.json", {
        "verb": "rollout", "success": res.success, "failure": res.failure,
        "terminal_pos_err_m": pos, "terminal_ang_err_rad": ang,
        "git_describe": io.git_describe(), "config": cfg.to_dict()})
    log(f"rollout ({cfg.controller}, {cfg.plant} plant): success={res.success} "
        f"terminal error {pos:.4f} m, {ang:.4f} rad")
    return EXIT_OK if res.success else EXIT_NUMERICAL


def cmd_sweep(cfg, out, log):
    scene, spec = _scene(cfg)
    plan = make_plan(cfg, scene, spec, log)
    gains = make_gains(cfg, scene, spec, plan)
    rep = run_sweep(scene, plan, gains, _perturbation(cfg), _plant_opts(cfg), scenario=spec,
                    threads=cfg.threads, meta={"controller": cfg.controller,
                                               "kappa_plan": cfg.kappa_plan,
                                               "kappa_gain": cfg.kappa_gain})
    io.save_report({cfg.controller: rep}, out, config=cfg)
    s = rep.summary()
    log(f"sweep ({cfg.controller}): {s['n_success']}/{s['n_samples']} succeeded, "
        f"Delta_pos = {rep.delta_pos:.5f} m, Delta_ang = {rep.delta_ang:.5f} rad")
    return EXIT_OK


def cmd_kappa_study(cfg, out, log):
    scene, spec = _scene(cfg)
    plan = make_plan(cfg, scene, spec, log)
    reps = kappa_study(scene, plan, _weights(cfg, scene), cfg.kappa_list, _perturbation(cfg),
                       _plant_opts(cfg), scenario=spec, threads=cfg.threads)
    named = {f"kappa_{k:g}": r for k, r in zip(cfg.kappa_list, reps)}
    for r in reps:
        r.meta["kappa_plan"] = cfg.kappa_plan
    io.save_report(named, out, config=cfg)
    for name, r in named.items():
        log(f"{name}: Delta_pos = {r.delta_pos:.5f} +/- {r.ci():.5f} m "
            f"({r.n_success}/{len(r.records)} succeeded)")
    return EXIT_OK


def cmd_demo_unilateral(cfg, out, log):
    rep = unilateral_demo(kappa=160.0)
    log(f"1-D ball push, one-step LQR at kappa={rep.kappa:g}")
    log(rep.table())
    log("PASS" if rep.passed else "FAIL")
    cases = {c.name: {"object_error": c.object_error, "dv": c.dv,
                      "predicted_object_motion": c.predicted_object_motion,
                      "exact_object_motion": c.exact_object_motion,
                      "error_after": c.post_error} for c in (rep.push, rep.pull)}
    io.write_json(out / "summary.json", {"verb": "demo-unilateral", "kappa": rep.kappa,
                                          "passed": rep.passed, "cases": cases,
                                          "git_describe": io.git_describe()})
    return EXIT_OK if rep.passed else EXIT_NUMERICAL


def gradcheck_cases(kappa):
    """(preset, max rel error A, max rel error B) at each preset's default start."""
    rows = []
    for name in sorted(PRESETS):
        scene, spec = load_preset(name)
        x = np.array(spec.x0, dtype=float)
        push = np.full(scene.n_a, 0.0)
        push[0::2] = 0.08  # command the robot towards the object along +x
        u = x[scene.n_u:] + push
        A, B = linearize(scene, x, u, kappa)
        Af, Bf = finite_diff_linearize(scene, x, u, kappa)
        rows.append((name, max_relative_error(A, Af), max_relative_error(B, Bf)))
    return rows


def cmd_gradcheck(cfg, out, log, kappa=None):
    kappa = cfg.kappa_gain if kappa is None else kappa
    rows = gradcheck_cases(kappa)
    ok = True
    log(f"{'preset':<16}{'err A':>12}{'err B':>12}   (kappa={kappa:g})")
    for name, ea, eb in rows:
        log(f"{name:<16}{ea:>12.3e}{eb:>12.3e}")
        ok &= max(ea, eb) <= GRADCHECK_TOL
    io.write_json(out / "summary.json", {
        "verb": "gradcheck", "kappa": kappa, "tolerance": GRADCHECK_TOL, "passed": ok,
        "cases": {n: {"A": a, "B": b} for n, a, b in rows}})
    log("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERICAL


_COMMANDS = {"plan": cmd_plan, "gains": cmd_gains, "rollout": cmd_rollout,
             "sweep": cmd_sweep, "kappa-study": cmd_kappa_study,
             "demo-unilateral": cmd_demo_unilateral, "gradcheck": cmd_gradcheck}


def main(argv=None, env=None):
    args = _parser().parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        cfg = resolve_config(args, env)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "gradcheck":
            return cmd_gradcheck(cfg, out, log, args.kappa)
        return _COMMANDS[args.verb](cfg, out, log)
    except (ConfigurationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CscError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
