"""Contact-implicit trajectory optimisation by single shooting.

The decision variables are the commanded robot positions ``v_0 .. v_{T-1}``;
states are always the exact smoothed rollout, so the dynamics constraint holds
by construction.  Box bounds and finger separation are imposed with a fixed
quadratic hinge penalty.  The multi-parameter variant shares one input
sequence across several shape particles and averages (or soft-maxes) their
costs.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import linearize, smoothed_step
from .errors import CscError, ConfigurationError, RolloutError
from .scenarios import TRACK_Q, TRACK_QT, TRACK_R, adapt_diagonal, finger_offsets


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray
    QT: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "QT"):
            M = np.array(getattr(self, name), dtype=float)
            if M.ndim == 1:
                M = np.diag(M)
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ConfigurationError(f"{name} must be a symmetric matrix")
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 or np.linalg.eigvalsh(self.QT).min() < -1e-12:
            raise ConfigurationError("Q and QT must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ConfigurationError("R must be positive definite")

    @classmethod
    def from_diagonals(cls, q, r, qT, n_u, n_a):
        return cls(adapt_diagonal(q, n_u, n_a), adapt_diagonal(r, n_u, n_a, "R"),
                   adapt_diagonal(qT, n_u, n_a))

    @classmethod
    def tracking(cls, n_u, n_a):
        return cls.from_diagonals(TRACK_Q, TRACK_R, TRACK_QT, n_u, n_a)

    def scaled(self, q=1.0, r=1.0, qT=1.0):
        return CostWeights(self.Q * q, self.R * r, self.QT * qT)


@dataclass
class ReferencePlan:
    x_ref: np.ndarray
    v_ref: np.ndarray

    @property
    def T(self):
        return self.v_ref.shape[0]

    @property
    def goal(self):
        return self.x_ref[-1]


@dataclass
class Plan:
    x_opt: np.ndarray
    v_opt: np.ndarray
    goal: np.ndarray
    converged: bool
    final_cost: float
    per_particle_x: Optional[np.ndarray] = None
    iterations: int = 0
    initial_cost: float = np.nan
    history: list = field(default_factory=list, repr=False)

    @property
    def T(self):
        return self.v_opt.shape[0]


@dataclass(frozen=True)
class Constraints:
    """Penalised constraints: state / input boxes and pairwise separations.

    `separations` holds ``(idx_a, idx_b, min_dist)`` with index pairs into the
    state (planar positions whose distance must stay above `min_dist`).
    """

    x_lo: Optional[np.ndarray] = None
    x_hi: Optional[np.ndarray] = None
    v_lo: Optional[np.ndarray] = None
    v_hi: Optional[np.ndarray] = None
    separations: tuple = ()
    weight: float = 1e3

    def violation(self, xs, vs):
        """Largest box violation as a fraction of the box width."""
        worst = 0.0
        for arr, lo, hi in ((xs, self.x_lo, self.x_hi), (vs, self.v_lo, self.v_hi)):
            if lo is None:
                continue
            width = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
            worst = max(worst, float(np.max(np.maximum(lo - arr, arr - hi) / width,
                                            initial=0.0)))
        return max(worst, 0.0)


@dataclass
class TrajOptOptions:
    tol: float = 1e-6
    min_decrease: float = 1e-10
    max_iters: int = 500
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 0.02  # largest command change of the first trial step
    kappa: float = 1e5
    constraints: Constraints = field(default_factory=Constraints)
    robust: str = "mean"  # "mean" | "softmax"
    softmax_lambda: float = 1.0
    nominal_index: int = 0
    threads: int = 1


def constraints_for(spec, n_u, n_a):
    """Penalty set derived from a scenario: workspace box, command box, finger clearance."""
    n_x = n_u + n_a
    x_lo = np.full(n_x, -np.inf)
    x_hi = np.full(n_x, np.inf)
    for k, (lo, hi) in enumerate(spec.workspace):
        x_lo[k], x_hi[k] = lo, hi
    v_lo = v_hi = None
    if spec.v_bounds is not None:
        v_lo = np.full(n_a, spec.v_bounds[0])
        v_hi = np.full(n_a, spec.v_bounds[1])
    seps = ()
    if spec.finger_clearance > 0 and n_a == 4:
        seps = (((n_u, n_u + 1), (n_u + 2, n_u + 3), spec.finger_clearance),)
    return Constraints(x_lo, x_hi, v_lo, v_hi, seps)


# -- rollouts and costs ----------------------------------------------------------

def _rollout(scene, x0, v_seq, kappa, warm=None):
    """Smoothed rollout; `warm` is an earlier rollout's step list used as Newton starts."""
    xs = [np.asarray(x0, dtype=float)]
    steps = []
    for t, v in enumerate(v_seq):
        dq0 = warm[t].dq_star if warm is not None else None
        try:
            res = smoothed_step(scene, xs[-1], v, kappa, dq0=dq0)
        except CscError as exc:
            raise RolloutError(f"smoothed step failed: {exc}", t, exc) from exc
        steps.append(res)
        xs.append(res.q_next)
    return np.array(xs), steps


def rollout_open_loop(scene, x0, v_seq, kappa=None):
    """States ``x_0 .. x_T`` of the smoothed dynamics driven by `v_seq`."""
    kappa = scene.kappa if kappa is None else kappa
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, scene.n_a)
    return _rollout(scene, x0, v_seq, kappa)[0]


def _check_dims(x_seq, v_seq, weights, goal):
    T = v_seq.shape[0]
    if x_seq.shape[0] != T + 1:
        raise ConfigurationError("x_seq must hold T+1 states for T inputs")
    n_x, n_a = x_seq.shape[1], v_seq.shape[1]
    if weights.Q.shape != (n_x, n_x) or weights.QT.shape != (n_x, n_x):
        raise ConfigurationError("state weights do not match the state dimension")
    if weights.R.shape != (n_a, n_a):
        raise ConfigurationError("input weights do not match the input dimension")
    if np.shape(goal) != (n_x,):
        raise ConfigurationError("goal must be a full state")


def traj_cost(x_seq, v_seq, weights, goal):
    x_seq = np.atleast_2d(np.asarray(x_seq, dtype=float))
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, weights.R.shape[0])
    goal = np.asarray(goal, dtype=float)
    _check_dims(x_seq, v_seq, weights, goal)
    T = v_seq.shape[0]
    if T == 0:
        return 0.0
    e = x_seq[1:] - goal
    cost = float(np.einsum("ti,ij,tj->", e[:-1], weights.Q, e[:-1]))
    cost += float(e[-1] @ weights.QT @ e[-1])
    cost += float(np.einsum("ti,ij,tj->", v_seq, weights.R, v_seq))
    return cost


def _hinge(g):
    """Quadratic hinge: value and derivative of max(0, g)^2."""
    pos = np.maximum(g, 0.0)
    return pos * pos, 2.0 * pos


def _penalty(xs, vs, cons):
    """Penalty value and its gradients w.r.t. states x_1..x_T and inputs."""
    w = cons.weight
    gx = np.zeros_like(xs)
    gv = np.zeros_like(vs)
    val = 0.0
    x = xs[1:]
    for arr, grad, lo, hi in ((x, gx[1:], cons.x_lo, cons.x_hi), (vs, gv, cons.v_lo, cons.v_hi)):
        if lo is None:
            continue
        lo = np.where(np.isfinite(lo), lo, -1e300)
        hi = np.where(np.isfinite(hi), hi, 1e300)
        p1, d1 = _hinge(lo - arr)
        p2, d2 = _hinge(arr - hi)
        val += w * float(p1.sum() + p2.sum())
        grad += w * (d2 - d1)
    for ia, ib, dmin in cons.separations:
        ia, ib = list(ia), list(ib)
        d = x[:, ib] - x[:, ia]
        dist = np.linalg.norm(d, axis=1)
        p, dp = _hinge(dmin - dist)
        val += w * float(p.sum())
        unit = d / np.maximum(dist, 1e-12)[:, None]
        coeff = (-w * dp)[:, None] * unit  # d(penalty)/d(x_b)
        gx[1:, ib] += coeff
        gx[1:, ia] -= coeff
    return val, gx, gv


def _objective(scene, x0, v_seq, weights, goal, kappa, cons, want_grad=True, cached=None,
               warm=None):
    """Cost (+ penalty) of a single-shooting rollout and its input gradient.

    `cached` is an earlier ``(xs, steps)`` rollout of the same inputs.
    Returns ``(value, xs, grad, steps)``.
    """
    xs, steps = cached if cached is not None else _rollout(scene, x0, v_seq, kappa, warm)
    cost = traj_cost(xs, v_seq, weights, goal)
    pen, gx_pen, gv_pen = (0.0, None, None) if cons is None else _penalty(xs, v_seq, cons)
    if not want_grad:
        return cost + pen, xs, None, steps
    T = v_seq.shape[0]
    e = xs - goal
    lam = 2.0 * weights.QT @ e[T]
    if gx_pen is not None:
        lam = lam + gx_pen[T]
    grad = np.zeros_like(v_seq)
    for t in range(T - 1, -1, -1):
        try:
            A, B = linearize(scene, xs[t], v_seq[t], kappa, step_result=steps[t])
        except CscError as exc:
            raise RolloutError(f"linearisation failed: {exc}", t, exc) from exc
        grad[t] = 2.0 * weights.R @ v_seq[t] + B.T @ lam
        if gv_pen is not None:
            grad[t] += gv_pen[t]
        if t > 0:
            lam = A.T @ lam + 2.0 * weights.Q @ e[t]
            if gx_pen is not None:
                lam = lam + gx_pen[t]
    return cost + pen, xs, grad, steps


def traj_cost_gradient(scene, x0, v_seq, weights, goal, kappa=None, constraints=None):
    """Adjoint gradient of ``traj_cost(rollout(v_seq))`` with respect to `v_seq`."""
    kappa = scene.kappa if kappa is None else kappa
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, scene.n_a)
    return _objective(scene, x0, v_seq, weights, np.asarray(goal, float), kappa,
                      constraints)[2]


def softmax_robust_cost(costs, lam):
    """Smooth worst case ``(1/lam) log mean exp(lam J_i)``, computed with a max shift."""
    costs = np.asarray(costs, dtype=float).ravel()
    if costs.size == 0:
        raise ConfigurationError("softmax of an empty cost list")
    if not lam > 0:
        raise ConfigurationError("temperature must be positive")
    m = costs.max()
    return float(m + np.log(np.mean(np.exp(lam * (costs - m)))) / lam)


def _softmax_weights(costs, lam):
    z = lam * (np.asarray(costs) - np.max(costs))
    w = np.exp(z)
    return w / w.sum()


# -- optimiser -----------------------------------------------------------------

def _multi_objective(scenes, x0s, v, weights, goal, opts, want_grad=True, cached=None,
                     warm=None):
    """Aggregate objective; returns ``(value, xs list, grad, rollouts)``."""
    def one(i):
        return _objective(scenes[i], x0s[i], v, weights, goal, opts.kappa,
                          opts.constraints, want_grad,
                          None if cached is None else cached[i],
                          None if warm is None else warm[i][1])

    n = len(scenes)
    if opts.threads > 1 and n > 1:
        with ThreadPoolExecutor(opts.threads) as pool:
            outs = list(pool.map(one, range(n)))
    else:
        outs = [one(i) for i in range(n)]
    costs = [o[0] for o in outs]
    xs = [o[1] for o in outs]
    rolls = [(o[1], o[3]) for o in outs]
    if n == 1:
        return costs[0], xs, outs[0][2], rolls
    if opts.robust == "softmax":
        total = softmax_robust_cost(costs, opts.softmax_lambda)
        wts = _softmax_weights(costs, opts.softmax_lambda)
    elif opts.robust == "mean":
        total = sum(costs) / n
        wts = np.full(n, 1.0 / n)
    else:
        raise ConfigurationError(f"unknown robust cost {opts.robust!r}")
    grad = None
    if want_grad:
        grad = np.zeros_like(v)
        for wi, o in zip(wts, outs):
            grad += wi * o[2]
    return total, xs, grad, rolls


def _descend(scenes, x0s, v0, weights, goal, opts):
    v = np.array(v0, dtype=float)
    J, xs, g, cur = _multi_objective(scenes, x0s, v, weights, goal, opts)
    J0 = J
    history = [J]
    converged = False
    alpha = None
    it = 0
    for it in range(1, opts.max_iters + 1):
        gn = float(np.linalg.norm(g))
        if gn <= opts.tol:
            converged = True
            it -= 1
            break
        if alpha is None:
            alpha = opts.initial_step / max(np.max(np.abs(g)), 1e-300)
        accepted = failed = False
        a = alpha
        for _ in range(opts.max_backtracks):
            trial = v - a * g
            try:
                Jt, _, _, rolls = _multi_objective(scenes, x0s, trial, weights, goal,
                                                   opts, want_grad=False, warm=cur)
                failed = False
            except RolloutError:
                Jt, failed = np.inf, True
            if Jt <= J - opts.armijo * a * gn * gn:
                accepted = True
                break
            a *= opts.backtrack
        if not accepted:
            # a stalled line search counts as converged; a failing rollout does not
            converged = not failed
            break
        decrease = J - Jt
        try:
            Jn, xn, gnew, cur = _multi_objective(scenes, x0s, trial, weights, goal, opts,
                                                 cached=rolls)
        except RolloutError:
            break  # abort with the best iterate so far
        s_k, y_k = trial - v, gnew - g
        v, J, xs, g = trial, Jn, xn, gnew
        history.append(J)
        # short Barzilai-Borwein step as the next trial step
        sy = float(np.sum(s_k * y_k))
        alpha = sy / float(np.sum(y_k * y_k)) if sy > 0 else a / opts.backtrack
        if decrease < opts.min_decrease:
            converged = True
            break
    return v, J, xs, converged, it, J0, history


def sp_trajopt(scene, p, reference, weights, opts=None):
    """Single-parameter plan under shape `p`, warm-started from `reference`."""
    if p is not None and p != scene.params:
        scene = scene.with_params(p)
    x0 = reference.x_ref[0] if p is None else p.initial_state(reference.x_ref[0])
    return _plan([scene], [x0], reference, weights, opts or TrajOptOptions())


def mp_trajopt(scene_family, particles, reference, weights, opts=None):
    """Shared-input plan minimising the average (or soft-max) cost over `particles`.

    `scene_family` maps a :class:`ShapeParam` to a scene.  The returned
    ``x_opt`` is the rollout under ``particles[opts.nominal_index]``.
    """
    opts = opts or TrajOptOptions()
    if not particles:
        raise ConfigurationError("need at least one particle")
    scenes = [scene_family(p) for p in particles]
    x0s = [p.initial_state(reference.x_ref[0]) for p in particles]
    return _plan(scenes, x0s, reference, weights, opts)


def _plan(scenes, x0s, reference, weights, opts):
    goal = np.asarray(reference.goal, dtype=float)
    v, J, xs, converged, iters, J0, hist = _descend(scenes, x0s, reference.v_ref, weights,
                                                    goal, opts)
    k = opts.nominal_index if len(scenes) > 1 else 0
    return Plan(
        x_opt=xs[k], v_opt=v, goal=goal, converged=converged, final_cost=J,
        per_particle_x=np.array(xs) if len(scenes) > 1 else None,
        iterations=iters, initial_cost=J0, history=hist,
    )


# -- warm starts -----------------------------------------------------------------

def generate_reference(spec, x0, goal, T, approach=2, depth=0.0):
    """Straight-line object motion with fingers servo-tracking contact offsets.

    The object reference holds still for `approach` steps while the fingers
    close the initial gap, then moves linearly to `goal`.  The finger command
    at step t is the reference finger position at knot t (contact offset,
    `depth` metres into the object), so like any kinematic plan the executed
    rollout lags the reference and ends short of the goal.
    """
    if not 4 <= T <= 64:
        raise ConfigurationError(f"horizon T={T} outside [4, 64]")
    x0 = np.asarray(x0, dtype=float)
    goal = np.asarray(goal, dtype=float)
    line = spec.dimensionality == "line"
    n_u = 1 if line else 3
    start = x0[:n_u]
    if goal.shape != (n_u,):
        raise ConfigurationError(f"goal must be an object pose of length {n_u}")
    for k, (lo, hi) in enumerate(spec.workspace):
        if not lo <= goal[k] <= hi:
            raise ConfigurationError(f"goal coordinate {k} = {goal[k]} outside workspace")
    approach = min(approach, T - 1)
    s = np.clip((np.arange(T + 1) - approach) / max(T - approach, 1), 0.0, 1.0)
    obj = start + s[:, None] * (goal - start)
    robot0 = x0[n_u:]
    disp = goal[: len(spec.workspace)] - start[: len(spec.workspace)]
    if np.allclose(disp, 0.0) and np.allclose(goal, start):
        x_ref = np.tile(x0, (T + 1, 1))
        return ReferencePlan(x_ref, np.tile(robot0, (T, 1)))
    r, rf = spec.object["radius"], spec.finger["radius"]
    robot = np.zeros((T + 1, robot0.size))
    for t in range(T + 1):
        frac = min(t / approach, 1.0) if approach > 0 else 1.0
        if line:
            sgn = 1.0 if disp[0] >= 0 else -1.0
            target = obj[t, 0] - sgn * (r + rf - depth)
            robot[t] = (1 - frac) * robot0 + frac * target
        else:
            bearing = np.arctan2(disp[1], disp[0]) + np.pi
            contact = obj[t, :2] + np.concatenate(
                finger_offsets(bearing, r, rf, -depth, 0.6)).reshape(2, 2)
            robot[t] = (1 - frac) * robot0 + frac * contact.ravel()
    x_ref = np.hstack([obj, robot])
    return ReferencePlan(x_ref, robot[:-1].copy())
