"""How the gain-smoothing kappa changes LQR tracking on the planar push."""
import numpy as np

from csc import (CostWeights, PerturbationSpec, TrajOptOptions, build_planar_push,
                 generate_reference, kappa_study, sp_trajopt)
from csc.trajopt import constraints_for

scene, spec = build_planar_push("a")
W = CostWeights.tracking(3, 4)
ref = generate_reference(spec, np.array(spec.x0), np.array([0.2, 0.0, 0.0]), 12)
plan = sp_trajopt(scene, None, ref, W, TrajOptOptions(constraints=constraints_for(spec, 3, 4)))
kappas = (50.0, 160.0, 800.0, 4000.0)
for k, rep in zip(kappas, kappa_study(scene, plan, W, kappas, PerturbationSpec(samples=20),
                                      scenario=spec)):
    print(f"kappa_gain {k:>7g}: Delta {rep.delta_pos:.5f} m, angle {rep.delta_ang:.4f} rad")
