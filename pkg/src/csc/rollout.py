"""Closed-loop execution of plans against a plant, perturbation sweeps and metrics."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ShapeParam, exact_step, linearize, smoothed_step
from .errors import ConfigurationError, CscError
from .lqr import gains_along_plan, keypoint_observe, one_step_lqr
from .scenarios import TRACK_QT, adapt_diagonal, build_ball1d

DEFAULT_SUBSTEPS = 4
FAIL_BOX_SCALE = 10.0
CI_Z = 1.959963984540054  # two-sided 95% normal quantile


# -- FOH controller ------------------------------------------------------------------

def _interp(knots, h, t):
    """Piecewise-linear interpolation of `knots` placed at k*h, held at both ends."""
    n = knots.shape[0]
    s = t / h
    if abs(s - round(s)) <= 1e-9 * max(1.0, abs(s)):
        s = float(round(s))  # k*h / h is not always exactly k in floating point
    if s <= 0 or n == 1:
        return knots[0].copy()
    if s >= n - 1:
        return knots[-1].copy()
    k = int(np.floor(s))
    w = s - k
    if w == 0.0:
        return knots[k].copy()
    return (1.0 - w) * knots[k] + w * knots[k + 1]


@dataclass
class FohController:
    """First-order-hold interpolants of a plan and its gain schedule.

    Knot k sits at time ``k*h``.  The law is ``u = v_cmd - K (x_mea - x_foh)``
    where the command reaching its knot value ``v_k`` at ``(k+1) h`` is
    interpolated from the previous command (the start robot configuration
    before the first step).
    """

    x_knots: np.ndarray  # (T+1, n_x)
    v_knots: np.ndarray  # (T, n_a)
    K_knots: np.ndarray  # (T, n_a, n_state)
    h: float
    n_u: int
    layout: str = "plain"
    keypoints: Optional[object] = None

    @property
    def T(self):
        return self.v_knots.shape[0]

    def x_foh(self, t):
        return _interp(self.x_knots, self.h, t)

    def v_foh(self, t):
        return _interp(self.v_knots, self.h, t)

    def K_foh(self, t):
        return _interp(self.K_knots, self.h, t)

    def v_command(self, t_end):
        """Commanded robot position for a plant step ending at `t_end`."""
        if t_end >= self.h:
            return self.v_foh(t_end - self.h)
        w = max(t_end, 0.0) / self.h
        return (1.0 - w) * self.x_knots[0, self.n_u:] + w * self.v_knots[0]

    def error(self, x_mea, t):
        x_ref = self.x_foh(t)
        dx = np.asarray(x_mea, dtype=float) - x_ref
        if self.layout == "expanded":
            dz = keypoint_observe(x_mea[: self.n_u], self.keypoints) - keypoint_observe(
                x_ref[: self.n_u], self.keypoints)
            dx = np.concatenate([dx, dz])
        return dx

    def command(self, t_start, t_end, x_mea):
        return self.v_command(t_end) - self.K_foh(t_start) @ self.error(x_mea, t_start)


def build_foh(plan, gains=None, h=0.1, n_u=None):
    """FOH controller for `plan`; ``gains=None`` gives the open-loop controller."""
    x = np.asarray(plan.x_opt, dtype=float)
    v = np.asarray(plan.v_opt, dtype=float)
    T, n_a = v.shape
    n_x = x.shape[1]
    if x.shape[0] != T + 1:
        raise ConfigurationError("plan must hold T+1 states for T inputs")
    if n_u is None:
        n_u = n_x - n_a
    if gains is None:
        return FohController(x, v, np.zeros((T, n_a, n_x)), h, n_u)
    if gains.T != T:
        raise ConfigurationError(f"gain horizon {gains.T} does not match plan horizon {T}")
    return FohController(x, v, np.asarray(gains.K_seq, dtype=float), h, n_u,
                         gains.state_layout, gains.keypoints)


# -- closed loop ----------------------------------------------------------------------

@dataclass
class RolloutResult:
    xs: np.ndarray  # plant-rate trajectory, possibly truncated
    us: np.ndarray
    success: bool
    failure: Optional[str] = None

    @property
    def terminal(self):
        return self.xs[-1]


def _fail_box(workspace):
    if workspace is None:
        return None
    lo = np.array([w[0] for w in workspace], dtype=float)
    hi = np.array([w[1] for w in workspace], dtype=float)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid - FAIL_BOX_SCALE * half, mid + FAIL_BOX_SCALE * half


def closed_loop_rollout(plant, controller, x_start, substeps=DEFAULT_SUBSTEPS, *,
                        kind="exact", kappa=None, v_bounds=None, workspace=None):
    """Run `controller` on `plant` (a SceneModel) from `x_start`.

    ``kind`` is ``"exact"`` or ``"smoothed"`` (at `kappa`, default the scene's).
    The plant advances ``h / substeps`` per tick and the command is recomputed
    and clamped to `v_bounds` every tick.
    """
    if substeps < 1:
        raise ConfigurationError("substeps must be >= 1")
    if kind not in ("exact", "smoothed"):
        raise ConfigurationError(f"unknown plant kind {kind!r}")
    if not np.isclose(controller.h, plant.h):
        raise ConfigurationError("controller and plant disagree on the step length")
    sub = plant.substep_scene(substeps)
    kappa = plant.kappa if kappa is None else float(kappa)
    dt = plant.h / substeps
    box = _fail_box(workspace)
    x = np.array(x_start, dtype=float)
    xs, us = [x.copy()], []
    for t in range(controller.T):
        for j in range(substeps):
            t0 = t * plant.h + j * dt
            u = controller.command(t0, t0 + dt, x)
            if v_bounds is not None:
                u = np.clip(u, v_bounds[0], v_bounds[1])
            try:
                if kind == "exact":
                    x = exact_step(sub, x, u)
                else:
                    x = smoothed_step(sub, x, u, kappa).q_next
            except CscError as exc:
                return RolloutResult(np.array(xs), np.array(us).reshape(-1, plant.n_a),
                                     False, f"t={t0:.3f}: {exc}")
            xs.append(x)
            us.append(u)
            if box is not None:
                p = x[: len(box[0])]
                if np.any(p < box[0]) or np.any(p > box[1]):
                    return RolloutResult(np.array(xs), np.array(us), False,
                                         f"t={t0 + dt:.3f}: left the workspace")
    return RolloutResult(np.array(xs), np.array(us).reshape(-1, plant.n_a), True)


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def terminal_error(x_mea_T, x_ref_T):
    """(position error m, |wrapped angle error| rad) between object poses.

    Poses of length 3 are ``(x, y, theta)``; shorter ones carry no angle.
    """
    a = np.atleast_1d(np.asarray(x_mea_T, dtype=float))
    b = np.atleast_1d(np.asarray(x_ref_T, dtype=float))
    if a.shape != b.shape:
        raise ConfigurationError("poses must have the same shape")
    if a.size >= 3:
        return float(np.linalg.norm(a[:2] - b[:2])), float(abs(wrap_angle(a[2] - b[2])))
    return float(np.linalg.norm(a - b)), 0.0


# -- sweeps ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "initial_pose"  # "initial_pose" | "shape_radius"
    bounds: tuple = (0.025, 0.025, np.deg2rad(5.0))
    samples: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("initial_pose", "shape_radius"):
            raise ConfigurationError(f"unknown perturbation kind {self.kind!r}")
        b = tuple(float(v) for v in np.atleast_1d(self.bounds))
        if any(not v >= 0 for v in b):
            raise ConfigurationError("perturbation bounds must be >= 0")
        if self.kind == "shape_radius" and len(b) != 1:
            raise ConfigurationError("shape_radius takes a single bound")
        if self.samples < 0:
            raise ConfigurationError("sample count must be >= 0")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def shape_radius(cls, dr=0.01, samples=20, seed=0):
        return cls("shape_radius", (dr,), samples, seed)

    def draw(self, i):
        """Sample `i`, from its own counter-derived stream."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(i,)))
        b = np.asarray(self.bounds)
        return rng.uniform(-b, b)


@dataclass
class SweepReport:
    records: list  # dicts: sample_id, perturbation, pos_err, ang_err, success
    meta: dict = field(default_factory=dict)

    @property
    def n_success(self):
        return sum(r["success"] for r in self.records)

    @property
    def n_failed(self):
        return len(self.records) - self.n_success

    @property
    def defined(self):
        return self.n_success > 0

    def _errs(self, key):
        return np.array([r[key] for r in self.records if r["success"]], dtype=float)

    @property
    def delta_pos(self):
        e = self._errs("pos_err")
        return float(e.mean()) if e.size else float("nan")

    @property
    def delta_ang(self):
        e = self._errs("ang_err")
        return float(e.mean()) if e.size else float("nan")

    def ci(self, key="pos_err"):
        """95% normal-approximation half-width of the mean."""
        e = self._errs(key)
        if e.size < 2:
            return float("nan")
        return float(CI_Z * e.std(ddof=1) / np.sqrt(e.size))

    def summary(self):
        return {
            "delta_pos_m": self.delta_pos if self.defined else None,
            "delta_ang_rad": self.delta_ang if self.defined else None,
            "ci95_pos_m": self.ci("pos_err") if self.n_success > 1 else None,
            "ci95_ang_rad": self.ci("ang_err") if self.n_success > 1 else None,
            "n_samples": len(self.records),
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "delta_defined": self.defined,
        }


def eta(delta_b, delta_a):
    """Relative cost ``Delta_B / Delta_A`` from two reports or two numbers."""
    b = delta_b.delta_pos if isinstance(delta_b, SweepReport) else float(delta_b)
    a = delta_a.delta_pos if isinstance(delta_a, SweepReport) else float(delta_a)
    if not a > 0:
        raise ConfigurationError("baseline Delta must be positive")
    return b / a


def _one_sample(i, scene, plan, controller, spec, plant_opts, scenario):
    d = spec.draw(i)
    x_start = np.array(plan.x_opt[0], dtype=float)
    plant = scene
    if spec.kind == "initial_pose":
        k = min(d.size, scene.n_u)
        x_start[:k] += d[:k]
    else:
        r = scene.params.radius if scene.params is not None else None
        if r is None:
            raise ConfigurationError("shape sweeps need a scene built from a ShapeParam")
        plant = scene.with_params(ShapeParam(r + d[0]))
    v_bounds = scenario.v_bounds if scenario is not None else None
    workspace = scenario.workspace if scenario is not None else None
    res = closed_loop_rollout(plant, controller, x_start, plant_opts.get("substeps",
                              DEFAULT_SUBSTEPS), kind=plant_opts.get("kind", "exact"),
                              kappa=plant_opts.get("kappa"), v_bounds=v_bounds,
                              workspace=workspace)
    n_u = scene.n_u
    pos, ang = terminal_error(res.terminal[:n_u], np.asarray(plan.goal)[:n_u])
    return {"sample_id": i, "perturbation": tuple(float(v) for v in d),
            "pos_err": pos, "ang_err": ang, "success": bool(res.success)}


def run_sweep(scene, plan, gains, spec, plant_opts=None, *, scenario=None, h=None,
              threads=1, meta=None):
    """Perturbation sweep of the FOH controller built from `plan` and `gains`.

    `scenario` (a ScenarioSpec) supplies the command box and workspace.  Errors
    are measured against the goal pose of the plan's reference.
    """
    plant_opts = dict(plant_opts or {})
    controller = build_foh(plan, gains, scene.h if h is None else h, scene.n_u)

    def one(i):
        return _one_sample(i, scene, plan, controller, spec, plant_opts, scenario)

    if threads > 1 and spec.samples > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, range(spec.samples)))
    else:
        records = [one(i) for i in range(spec.samples)]
    m = {"kind": spec.kind, "bounds": list(spec.bounds), "samples": spec.samples,
         "seed": spec.seed, "controller": "open_loop" if gains is None else gains.state_layout,
         "plant": plant_opts.get("kind", "exact"),
         "substeps": plant_opts.get("substeps", DEFAULT_SUBSTEPS)}
    m.update(meta or {})
    return SweepReport(records, m)


def kappa_study(scene, plan, weights, kappa_list=(160.0, 800.0), spec=None, plant_opts=None,
                *, scenario=None, threads=1):
    """One LQR sweep per gain-smoothing kappa; reports carry ``meta['kappa_gain']``."""
    if not kappa_list:
        raise ConfigurationError("kappa_list must not be empty")
    spec = spec or PerturbationSpec()
    out = []
    for kappa in kappa_list:
        gains = gains_along_plan(scene, plan, weights, kappa)
        rep = run_sweep(scene, plan, gains, spec, plant_opts, scenario=scenario,
                        threads=threads, meta={"kappa_gain": float(kappa),
                                               "controller": "lqr"})
        out.append(rep)
    return out


# -- unilaterality ---------------------------------------------------------------------

@dataclass
class UnilateralCase:
    name: str
    object_error: float  # measured minus reference object position
    dv: float  # one-step LQR command correction
    predicted_object_motion: float  # B[u] * dv of the smoothed linearisation
    exact_object_motion: float  # object displacement under the exact plant

    @property
    def toward_goal(self):
        return self.exact_object_motion * (-self.object_error) > 0

    @property
    def post_error(self):
        return self.object_error + self.exact_object_motion


@dataclass
class UnilateralReport:
    kappa: float
    push: UnilateralCase
    pull: UnilateralCase

    @property
    def passed(self):
        return (self.push.dv > 0 and self.push.toward_goal
                and abs(self.push.post_error) < abs(self.push.object_error)
                and self.pull.dv < 0 and self.pull.exact_object_motion == 0.0
                and abs(self.pull.predicted_object_motion) > 0)

    def table(self):
        head = (f"{'case':<6}{'obj err':>10}{'dv':>11}{'lin. pred.':>12}{'exact':>11}"
                f"{'err after':>11}")
        rows = [head]
        for c in (self.push, self.pull):
            rows.append(f"{c.name:<6}{c.object_error:>10.4f}{c.dv:>11.4f}"
                        f"{c.predicted_object_motion:>12.5f}{c.exact_object_motion:>11.5f}"
                        f"{c.post_error:>11.5f}")
        return "\n".join(rows)


def unilateral_demo(kappa=160.0, gap=0.02, error=0.01):
    """Push and pull cases of the 1-D ball fixture.

    The nominal holds the pusher `gap` metres behind the ball.  In the push
    case the whole configuration lags its reference by `error`; in the pull
    case the ball alone has overshot by `error`.  Each case applies the
    one-step LQR correction (terminal weight as value matrix, linearised at
    the nominal) to the exact plant.
    """
    scene, spec = build_ball1d({"gap": gap})
    x_nom = np.array(spec.x0)
    v_nom = x_nom[1:].copy()
    P1 = np.diag(adapt_diagonal(TRACK_QT, 1, 1))
    A, B = linearize(scene, x_nom, v_nom, kappa)
    cases = {}
    for name, dx in (("push", np.array([-error, -error])), ("pull", np.array([error, 0.0]))):
        x_mea = x_nom + dx
        dv = float(one_step_lqr(A, B, P1, dx)[0])
        u = np.clip(v_nom + dv, *spec.v_bounds)
        x_next = exact_step(scene, x_mea, u)
        cases[name] = UnilateralCase(name, float(dx[0]), dv, float(B[0, 0] * dv),
                                     float(x_next[0] - x_mea[0]))
    return UnilateralReport(float(kappa), cases["push"], cases["pull"])
