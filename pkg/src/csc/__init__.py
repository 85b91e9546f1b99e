"""Contact-smoothed planning and control for quasi-dynamic pushing."""

from .dynamics import (SceneModel, ShapeParam, StepResult, exact_solve, exact_step,
                       finite_diff_jacobians, finite_diff_linearize, linearize,
                       max_relative_error, smoothed_step)
from .errors import (ConditioningWarning, ConfigurationError, CscError,
                     DegenerateGeometryError, InfeasibleStartError, NonConvergenceError,
                     RolloutError)
from .geometry import ContactPair, Disc, HalfPlane, Point, contact_kernel
from .lqr import (GainSchedule, KeypointSet, fold_keypoint_weights, fold_weights,
                  gains_along_plan, keypoint_observe, kp_lqr, kp_weights, one_step_lqr,
                  tvlqr)
from .rollout import (FohController, PerturbationSpec, SweepReport, build_foh,
                      closed_loop_rollout, eta, kappa_study, run_sweep, terminal_error,
                      unilateral_demo)
from .scenarios import (ScenarioSpec, build_ball1d, build_planar_push, default_particles,
                        load_preset, sample_push_task)
from .trajopt import (CostWeights, Plan, ReferencePlan, TrajOptOptions, generate_reference,
                      mp_trajopt, rollout_open_loop, softmax_robust_cost, sp_trajopt,
                      traj_cost, traj_cost_gradient)

__version__ = "0.1.0"
