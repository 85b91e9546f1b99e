"""Log-barrier smoothed quasi-dynamic contact step and its derivatives.

One step solves

    min_dq  1/2 dq'Q dq + b'dq - (1/kappa) sum_i B_i(J_i dq + [phi_i; 0])

with ``Q = diag(eps M_u / h, h K_a)`` and
``b = -h [tau_u; K_a (u - q_a) + tau_a]``.  For a frictionless pair
``B(w) = log(w_n)``; for a planar frictional pair
``B(w) = log(w_n^2 - mu^2 w_t^2) + log(w_n)``.

The unsmoothed plant (`exact_step`) is the limit kappa -> inf, reached by
continuation and then polished on the active set so that complementarity is
satisfied to `EXACT_TOL`.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConditioningWarning,
    ConfigurationError,
    InfeasibleStartError,
    NonConvergenceError,
)
from .geometry import Disc, HalfPlane, Point, contact_kernel

NEWTON_TOL = 1e-10
MAX_NEWTON_ITERS = 100
EXACT_TOL = 1e-8
KAPPA_0 = 100.0
KAPPA_MAX = 1e7
COND_CAP = 1e12


@dataclass(frozen=True)
class ShapeParam:
    """Dynamics parameter of a scene, currently the object radius.

    `x_init` optionally pins the initial state that goes with this
    parameter; ``None`` means "use whatever the caller starts from".
    """

    radius: float
    x_init: Optional[tuple] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("radius must be positive")

    def initial_state(self, default):
        if self.x_init is None:
            return np.array(default, dtype=float)
        return np.array(self.x_init, dtype=float)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SceneModel:
    """Everything needed to evaluate one quasi-dynamic step.

    `K_a` is the diagonal of the robot stiffness matrix.  `builder`, when
    set, rebuilds the scene for a different :class:`ShapeParam`.
    """

    h: float
    epsilon: float
    M_u: np.ndarray
    K_a: np.ndarray
    tau_u: np.ndarray
    tau_a: np.ndarray
    bodies: tuple
    pairs: tuple
    kappa: float = 1e5
    params: Optional[ShapeParam] = None
    builder: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("M_u", "K_a", "tau_u", "tau_a"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        n_u, n_a = self.M_u.shape[0], self.K_a.shape[0]
        if not self.h > 0:
            raise ConfigurationError("h must be positive")
        if not self.kappa > 0:
            raise ConfigurationError("kappa must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("epsilon must lie in [0, 1]")
        if self.M_u.shape != (n_u, n_u) or not np.allclose(self.M_u, self.M_u.T):
            raise ConfigurationError("M_u must be a symmetric square matrix")
        if n_u and np.linalg.eigvalsh(self.M_u).min() <= 0:
            raise ConfigurationError("M_u must be positive definite")
        if self.K_a.ndim != 1 or np.any(self.K_a <= 0):
            raise ConfigurationError("K_a must be a vector of positive stiffnesses")
        if self.tau_u.shape != (n_u,) or self.tau_a.shape != (n_a,):
            raise ConfigurationError("tau_u / tau_a have the wrong length")
        names = {}
        for body in self.bodies:
            if body.name in names:
                raise ConfigurationError(f"duplicate body name {body.name!r}")
            if not isinstance(body, (Disc, Point, HalfPlane)):
                raise ConfigurationError(f"unknown primitive {body!r}")
            if not isinstance(body, HalfPlane):
                size = n_u if body.block == "u" else n_a
                local = tuple(body.dofs) + (
                    (body.angle_dof,) if getattr(body, "angle_dof", None) is not None else ()
                )
                if body.block not in ("u", "a") or any(not 0 <= i < size for i in local):
                    raise ConfigurationError(f"body {body.name!r} indexes outside its block")
            names[body.name] = body
        for pair in self.pairs:
            if pair.first not in names or pair.second not in names:
                raise ConfigurationError(f"pair {pair} names an unknown body")
            if pair.mu is None or pair.mu < 0:
                raise ConfigurationError(f"pair {pair} needs a friction coefficient >= 0")
        object.__setattr__(self, "body_map", names)

    @property
    def n_u(self):
        return self.M_u.shape[0]

    @property
    def n_a(self):
        return self.K_a.shape[0]

    @property
    def n_x(self):
        return self.n_u + self.n_a

    def split(self, x):
        x = np.asarray(x)
        return x[..., : self.n_u], x[..., self.n_u:]

    def with_params(self, params):
        if self.builder is None:
            raise ConfigurationError("scene has no builder; cannot change its parameters")
        return self.builder(params)

    def with_kappa(self, kappa):
        return replace(self, kappa=float(kappa))

    def substep_scene(self, substeps):
        """Same scene stepped at ``h / substeps``.

        The object block of Q (``eps M_u / h``) acts as a viscous damping
        coefficient; keeping it fixed means scaling eps with the step so a
        refined plant approaches the same continuous-time behaviour.
        """
        if substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        if substeps == 1:
            return self
        return replace(self, h=self.h / substeps, epsilon=self.epsilon / substeps)


@dataclass
class QpData:
    Q: np.ndarray
    b: np.ndarray
    contacts: list


@dataclass
class StepResult:
    q_next: np.ndarray
    dq_star: np.ndarray
    grad_norm: float
    newton_iters: int
    contacts: list  # per pair: {"pair_id", "phi", "margin"}
    kappa: float = None
    qp: QpData = field(default=None, repr=False)


def assemble_qp(scene, q, u, contacts):
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    if q.shape != (scene.n_x,):
        raise ConfigurationError(f"q has shape {q.shape}, expected ({scene.n_x},)")
    if u.shape != (scene.n_a,):
        raise ConfigurationError(f"u has shape {u.shape}, expected ({scene.n_a},)")
    n_u = scene.n_u
    Q = np.zeros((scene.n_x, scene.n_x))
    Q[:n_u, :n_u] = scene.epsilon * scene.M_u / scene.h
    Q[n_u:, n_u:] = np.diag(scene.h * scene.K_a)
    q_a = q[n_u:]
    b = -scene.h * np.concatenate([scene.tau_u, scene.K_a * (u - q_a) + scene.tau_a])
    return QpData(Q, b, contacts)


# -- barrier -------------------------------------------------------------------
#
# With at most one tangent direction the friction cone is polyhedral and
#   log(w_n^2 - mu^2 w_t^2) + log(w_n) = log(w_n - mu w_t) + log(w_n + mu w_t) + log(w_n),
# so the barrier is a sum of logs of affine rows  s_j = a_j . dq + c_j.

def _barrier_rows(contacts, n):
    """Stacked barrier rows (A, c, owner) with ``owner[j]`` the contact index."""
    rows, offs, owner = [], [], []
    for k, c in enumerate(contacts):
        if c.t_dim == 0:
            rows.append(c.J_n)
            offs.append(c.phi)
            owner.append(k)
        else:
            mt = c.mu * c.J_t[0]
            rows.extend([c.J_n - mt, c.J_n + mt, c.J_n])
            offs.extend([c.phi] * 3)
            owner.extend([k] * 3)
    return (np.array(rows, dtype=float).reshape(-1, n), np.array(offs, dtype=float),
            np.array(owner, dtype=int))


def _barrier_row_derivs(contacts, n):
    """dA[j, i, k] = d A[j, i] / d q_k, matching the row order of `_barrier_rows`."""
    out = []
    for c in contacts:
        if c.t_dim == 0:
            out.append(c.dJ[0])
        else:
            mt = c.mu * c.dJ[1]
            out.extend([c.dJ[0] - mt, c.dJ[0] + mt, c.dJ[0]])
    return np.array(out, dtype=float).reshape(-1, n, n)


def _strictly_inside(A, c, dq):
    return bool(np.all(A @ dq + c > 0))


def _phase_one(contacts, n):
    """Minimum-norm shift putting every offending contact at ``w_n > 0, w_t = 0``.

    The offending set grows until all cone arguments are interior, since fixing
    one pair can disturb another that shares a body.
    """
    A, off, owner = _barrier_rows(contacts, n)
    bad = set()
    dq = np.zeros(n)
    for _ in range(len(contacts) + 1):
        s = A @ dq + off
        if np.all(s > 0):
            return dq
        bad |= {int(k) for k in owner[s <= 0]}
        rows, rhs = [], []
        for k in sorted(bad):
            c = contacts[k]
            rows.append(c.J_n)
            rhs.append(max(1e-6, 2.0 * (-c.phi)) - c.phi)
            for jt in c.J_t:
                rows.append(jt)
                rhs.append(0.0)
        dq = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    if _strictly_inside(A, off, dq):
        return dq
    raise InfeasibleStartError("phase-1 retraction did not reach the cone interior")


def _barrier_newton(Q, b, A, c, kappa, dq0, tol, max_iters):
    """Newton's method with a fraction-to-boundary rule on the kappa-scaled objective.

    kappa * F is self-concordant: once the Newton decrement drops below 1/4 full
    steps are safe; before that an Armijo backtracking search is used.
    Returns (dq, grad_norm, iterations).
    """
    dq = np.array(dq0, dtype=float)
    n = dq.shape[0]
    bscale = 1.0 + np.max(np.abs(b), initial=0.0)
    kQ, kb = kappa * Q, kappa * b

    def value(x):
        return float(0.5 * x @ kQ @ x + kb @ x - np.sum(np.log(A @ x + c)))

    gnorm = np.inf
    for it in range(max_iters + 1):
        s = A @ dq + c
        inv = 1.0 / s
        Qdq = Q @ dq
        grad = kappa * Qdq + kb - A.T @ inv
        gnorm = np.max(np.abs(grad)) / kappa if n else 0.0
        scale = bscale + np.max(np.abs(Qdq), initial=0.0)
        if gnorm <= tol * scale:
            return dq, gnorm, it
        if it == max_iters:
            break
        H = kQ + (A.T * (inv * inv)) @ A  # positive definite: kappa Q > 0
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        dec2 = float(-grad @ step)
        if dec2 <= 1e-28 * (1.0 + kappa * scale):
            # nothing left to gain at double precision
            return dq, gnorm, it
        rate = A @ step
        neg = rate < 0
        amax = np.min(-s[neg] / rate[neg]) if np.any(neg) else np.inf
        alpha = min(1.0, 0.99 * amax)
        if dec2 >= 0.0625:
            f0 = value(dq)
            for _ in range(60):
                trial = dq + alpha * step
                if _strictly_inside(A, c, trial) and value(trial) <= f0 - 1e-4 * alpha * dec2:
                    break
                alpha *= 0.5
            else:
                raise NonConvergenceError("line search failed", gnorm)
        dq = dq + alpha * step
    raise NonConvergenceError(
        f"Newton did not converge in {max_iters} iterations", gnorm
    )


def smoothed_step(scene, q, u, kappa=None, *, tol=NEWTON_TOL, max_iters=MAX_NEWTON_ITERS,
                  dq0=None):
    """One kappa-smoothed quasi-dynamic step ``q_next = f_kappa(q, u)``."""
    kappa = scene.kappa if kappa is None else float(kappa)
    if not kappa > 0:
        raise ConfigurationError("kappa must be positive")
    q = np.asarray(q, dtype=float)
    n = scene.n_x
    contacts = contact_kernel(scene, q)
    qp = assemble_qp(scene, q, u, contacts)
    A, c, owner = _barrier_rows(contacts, n)
    if dq0 is None or not _strictly_inside(A, c, dq0):
        dq0 = np.zeros(n)
        if not _strictly_inside(A, c, dq0):
            dq0 = _phase_one(contacts, n)
    dq, gnorm, iters = _barrier_newton(qp.Q, qp.b, A, c, kappa, dq0, tol, max_iters)
    s = A @ dq + c
    diag = [{"pair_id": ci.pair_id, "phi": ci.phi, "margin": float(np.min(s[owner == k]))}
            for k, ci in enumerate(contacts)]
    return StepResult(q + dq, dq, gnorm, iters, diag, kappa, qp)


# -- exact plant -----------------------------------------------------------------

def _linear_rows(contacts):
    """Polyhedral form of the cones: rows a_j with a_j dq + c_j >= 0."""
    rows, offs = [], []
    for c in contacts:
        if c.t_dim == 0:
            rows.append(c.J_n)
            offs.append(c.phi)
        else:
            rows.append(c.J_n - c.mu * c.J_t[0])
            rows.append(c.J_n + c.mu * c.J_t[0])
            offs.extend([c.phi, c.phi])
    n = contacts[0].J_n.shape[0] if contacts else 0
    return np.array(rows).reshape(-1, n), np.array(offs, dtype=float)


def _polish(Q, b, A, c, active):
    """Solve the equality-constrained QP on `active`; return (dq, lam, residual)."""
    n = Q.shape[0]
    idx = np.flatnonzero(active)
    Aa = A[idx]
    m = len(idx)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = Q
    K[:n, n:] = -Aa.T
    K[n:, :n] = Aa
    rhs = np.concatenate([-b, -c[idx]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    dq = sol[:n]
    lam = np.zeros(A.shape[0])
    lam[idx] = sol[n:]
    s = A @ dq + c
    stat = Q @ dq + b - A.T @ lam
    res = max(
        float(np.max(-s, initial=0.0)),
        float(np.max(-lam, initial=0.0)),
        float(np.max(np.abs(lam * s), initial=0.0)),
        float(np.max(np.abs(stat), initial=0.0)),
    )
    return dq, lam, max(res, 0.0)


@dataclass
class ExactResult:
    q_next: np.ndarray
    dq: np.ndarray
    multipliers: np.ndarray
    residual: float
    kappa_reached: float


def exact_solve(scene, q, u, *, kappa0=KAPPA_0, kappa_max=KAPPA_MAX, tol=EXACT_TOL):
    """Unsmoothed step by kappa-continuation followed by active-set polishing."""
    q = np.asarray(q, dtype=float)
    contacts = contact_kernel(scene, q)
    qp = assemble_qp(scene, q, u, contacts)
    if not contacts:
        dq = np.linalg.solve(qp.Q, -qp.b)
        return ExactResult(q + dq, dq, np.zeros(0), 0.0, 0.0)
    A, c = _linear_rows(contacts)
    Ab, cb, _ = _barrier_rows(contacts, scene.n_x)
    qscale = float(np.max(np.diag(qp.Q)))
    dq = np.zeros(scene.n_x)
    if not _strictly_inside(Ab, cb, dq):
        dq = _phase_one(contacts, scene.n_x)
    kappa = kappa0
    last = np.inf
    while kappa <= kappa_max:
        try:
            dq, _, _ = _barrier_newton(qp.Q, qp.b, Ab, cb, kappa, dq, 1e-9,
                                       MAX_NEWTON_ITERS)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"continuation stalled at kappa={kappa:g}",
                                      exc.residual) from exc
        s = A @ dq + c
        lam = 1.0 / (kappa * s)
        active = lam > qscale * s
        cand, mult, res = _polish(qp.Q, qp.b, A, c, active)
        # primal-dual active-set corrections for weakly active (degenerate) rows
        for _ in range(A.shape[0]):
            if res <= tol:
                break
            fix = (active & (mult >= -tol)) | (~active & (A @ cand + c < -tol))
            if np.array_equal(fix, active):
                break
            active = fix
            cand, mult, res = _polish(qp.Q, qp.b, A, c, active)
        last = min(last, res)
        if res <= tol:
            return ExactResult(q + cand, cand, mult, res, kappa)
        kappa *= 2.0
    raise NonConvergenceError(
        f"exact step not certified up to kappa={kappa_max:g}", last
    )


def exact_step(scene, q, u, **kw):
    return exact_solve(scene, q, u, **kw).q_next


# -- derivatives -----------------------------------------------------------------

def linearize(scene, q, u, kappa=None, *, step_result=None):
    """A = df/dq and B = df/du of the smoothed step by implicit differentiation.

    Differentiates the stationarity condition G(dq*, q, u) = 0 of the barrier
    objective, including the configuration dependence of phi and J.
    """
    kappa = scene.kappa if kappa is None else float(kappa)
    q = np.asarray(q, dtype=float)
    res = step_result if step_result is not None else smoothed_step(scene, q, u, kappa)
    dq = res.dq_star
    n, n_u, n_a = scene.n_x, scene.n_u, scene.n_a
    contacts = contact_kernel(scene, q, with_derivatives=True)
    Q = res.qp.Q
    H = Q.copy()
    dGdq = np.zeros((n, n))
    dGdq[n_u:, n_u:] = np.diag(scene.h * scene.K_a)  # db/dq_a
    dGdu = np.zeros((n, n_a))
    dGdu[n_u:, :] = -np.diag(scene.h * scene.K_a)
    A, c, owner = _barrier_rows(contacts, n)
    if A.shape[0]:
        dA = _barrier_row_derivs(contacts, n)
        Jn = np.array([contacts[k].J_n for k in owner])
        inv = 1.0 / (A @ dq + c)
        H += (A.T * (inv * inv)) @ A / kappa
        # d s_j / d q = dA_j . dq + d phi / d q, and d phi / d q = J_n
        ds = np.einsum("jik,i->jk", dA, dq) + Jn
        dGdq -= (np.einsum("jik,j->ik", dA, inv) - (A.T * (inv * inv)) @ ds) / kappa
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > COND_CAP:
        warnings.warn(f"barrier Hessian condition number {cond:.3g}", ConditioningWarning,
                      stacklevel=2)
    S = -np.linalg.solve(H, np.hstack([dGdq, dGdu]))
    return np.eye(n) + S[:, :n], S[:, n:]


def finite_diff_jacobians(f, x, u, step=1e-6):
    """Central-difference Jacobians of a generic map ``f(x, u) -> x_next``."""
    if not step > 0:
        raise ConfigurationError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nx = x.shape[0]
    cols = []
    z = np.concatenate([x, u])
    for k in range(z.shape[0]):
        e = np.zeros_like(z)
        e[k] = step
        zp, zm = z + e, z - e
        fp = np.asarray(f(zp[:nx], zp[nx:]), dtype=float)
        fm = np.asarray(f(zm[:nx], zm[nx:]), dtype=float)
        cols.append((fp - fm) / (2.0 * step))
    D = np.array(cols).T
    return D[:, :nx], D[:, nx:]


def finite_diff_linearize(scene, q, u, kappa=None, step=1e-6):
    kappa = scene.kappa if kappa is None else float(kappa)
    return finite_diff_jacobians(
        lambda x, v: smoothed_step(scene, x, v, kappa).q_next, q, u, step
    )


def max_relative_error(M, M_ref):
    """Max-norm error relative to ``max(1, |M_ref|_max)``."""
    M, M_ref = np.asarray(M), np.asarray(M_ref)
    return float(np.max(np.abs(M - M_ref)) / max(1.0, np.max(np.abs(M_ref))))
