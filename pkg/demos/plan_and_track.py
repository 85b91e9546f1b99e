"""Plan a planar push, then compare open-loop and LQR tracking under pose noise.

Usage: python3 demos/plan_and_track.py [samples]
"""
import sys

import numpy as np

from csc import (CostWeights, PerturbationSpec, TrajOptOptions, build_planar_push, eta,
                 gains_along_plan, generate_reference, run_sweep, sp_trajopt)
from csc.trajopt import constraints_for

samples = int(sys.argv[1]) if len(sys.argv) > 1 else 20
scene, spec = build_planar_push("a")
W = CostWeights.tracking(3, 4)
goal = np.array([0.2, 0.0, 0.0])
ref = generate_reference(spec, np.array(spec.x0), goal, 12)
plan = sp_trajopt(scene, None, ref, W, TrajOptOptions(constraints=constraints_for(spec, 3, 4)))
print(f"plan: {plan.iterations} iterations, cost {plan.initial_cost:.3f} -> {plan.final_cost:.3f}, "
      f"terminal object pose {np.round(plan.x_opt[-1, :3], 4)}")

ps = PerturbationSpec(samples=samples)
open_loop = run_sweep(scene, plan, None, ps, scenario=spec)
lqr = run_sweep(scene, plan, gains_along_plan(scene, plan, W, 800.0), ps, scenario=spec)
for name, rep in (("open loop", open_loop), ("LQR", lqr)):
    print(f"{name:<10} Delta {rep.delta_pos:.4f} +- {rep.ci():.4f} m (95% CI), "
          f"{rep.n_success}/{samples} rollouts succeeded")
print(f"relative cost open loop / LQR: {eta(open_loop, lqr):.2f}")
