"""Time-varying LQR on the smoothed linearisation, plus the keypoint variant.

Gains are stored positive and applied as ``dv_t = -K_t dx_t``.  The cost is

    sum_{t<T} dx_t'Q_t dx_t + dv_t'R_t dv_t  +  dx_T'Q_T dx_T.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import linearize
from .errors import ConfigurationError, CscError, NonConvergenceError
from .scenarios import KAPPA_GAIN, KP_Q, KP_QT, KP_R
from .trajopt import CostWeights

ONE_STEP_REG = 1e-12


@dataclass
class GainSchedule:
    K_seq: np.ndarray  # (T, n_a, n_state)
    P_seq: np.ndarray  # (T+1, n_state, n_state)
    state_layout: str = "plain"  # "plain" | "expanded"
    n_x: Optional[int] = None
    keypoints: Optional["KeypointSet"] = None

    def __post_init__(self):
        if self.state_layout not in ("plain", "expanded"):
            raise ConfigurationError(f"unknown state layout {self.state_layout!r}")
        if self.n_x is None:
            self.n_x = self.K_seq.shape[2]

    @property
    def T(self):
        return self.K_seq.shape[0]

    def state_gains(self):
        """Gains restricted to the plant state columns."""
        return self.K_seq[:, :, : self.n_x]


@dataclass(frozen=True)
class KeypointSet:
    offsets: tuple  # body-frame 2-D points

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim != 2 or off.shape[1] != 2 or off.shape[0] < 1:
            raise ConfigurationError("keypoint offsets must be a non-empty (n_p, 2) array")
        object.__setattr__(self, "offsets", tuple(map(tuple, off)))

    @property
    def n_p(self):
        return len(self.offsets)

    @property
    def n_z(self):
        return 2 * self.n_p

    @classmethod
    def rim(cls, radius, n_p=4):
        """`n_p` evenly spaced rim points, starting at (r, 0)."""
        ang = 2.0 * np.pi * np.arange(n_p) / n_p
        return cls(tuple((radius * np.cos(a), radius * np.sin(a)) for a in ang))


def _as_seq(M, T, name):
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return np.broadcast_to(M, (T,) + M.shape)
    if M.ndim != 3 or M.shape[0] != T:
        raise ConfigurationError(f"{name} must be one matrix or a length-{T} sequence")
    return M


def tvlqr(A_seq, B_seq, weights, *, layout="plain", n_x=None, keypoints=None):
    """Backward Riccati recursion.

    `weights` is a :class:`CostWeights` (time-invariant) or a tuple
    ``(Q_seq, R_seq, Q_T)`` with per-step sequences.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    if A_seq.ndim != 3 or B_seq.ndim != 3 or A_seq.shape[0] != B_seq.shape[0]:
        raise ConfigurationError("A_seq and B_seq must be equal-length matrix sequences")
    T, n, _ = A_seq.shape
    m = B_seq.shape[2]
    if A_seq.shape[2] != n or B_seq.shape[1] != n:
        raise ConfigurationError("A_t must be square and B_t must have matching rows")
    if isinstance(weights, CostWeights):
        Q_seq, R_seq, Q_T = weights.Q, weights.R, weights.QT
    else:
        Q_seq, R_seq, Q_T = weights
    Q_seq = _as_seq(Q_seq, T, "Q")
    R_seq = _as_seq(R_seq, T, "R")
    Q_T = np.asarray(Q_T, dtype=float)
    if Q_seq.shape[1:] != (n, n) or Q_T.shape != (n, n) or R_seq.shape[1:] != (m, m):
        raise ConfigurationError(
            f"weight shapes do not match n_state={n}, n_input={m}"
        )
    K_seq = np.zeros((T, m, n))
    P_seq = np.zeros((T + 1, n, n))
    P = Q_T.copy()
    P_seq[T] = P
    for t in range(T - 1, -1, -1):
        A, B = A_seq[t], B_seq[t]
        PB = P @ B
        S = R_seq[t] + B.T @ PB
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError(f"R + B'PB not positive definite at t={t}") from exc
        K = np.linalg.solve(L.T, np.linalg.solve(L, PB.T @ A))
        P = Q_seq[t] + A.T @ P @ A - (PB.T @ A).T @ K
        P = 0.5 * (P + P.T)
        K_seq[t] = K
        P_seq[t] = P
    return GainSchedule(K_seq, P_seq, layout, n_x if n_x is not None else n, keypoints)


def linearize_plan(scene, plan, kappa=KAPPA_GAIN):
    """(A_seq, B_seq) of the kappa-smoothed dynamics at every knot of `plan`."""
    As, Bs = [], []
    for t in range(plan.T):
        try:
            A, B = linearize(scene, plan.x_opt[t], plan.v_opt[t], kappa)
        except CscError as exc:
            raise NonConvergenceError(f"linearisation failed at knot {t}: {exc}") from exc
        As.append(A)
        Bs.append(B)
    return np.array(As), np.array(Bs)


def gains_along_plan(scene, plan, weights=None, kappa=KAPPA_GAIN):
    """Vanilla TVLQR about `plan`, linearised with the (smoother) gain kappa."""
    if weights is None:
        weights = CostWeights.tracking(scene.n_u, scene.n_a)
    A_seq, B_seq = linearize_plan(scene, plan, kappa)
    return tvlqr(A_seq, B_seq, weights)


# -- keypoints ---------------------------------------------------------------------

def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def keypoint_observe(object_pose, kps):
    """Stacked world-frame keypoints ``[x, y] + R(theta) o_i``."""
    x, y, th = np.asarray(object_pose, dtype=float)[:3]
    off = np.asarray(kps.offsets)
    return (np.array([x, y]) + off @ _rot(th).T).ravel()


def keypoint_jacobian(object_pose, kps):
    """``dz / d(x, y, theta)``, shape (n_z, 3)."""
    th = float(np.asarray(object_pose)[2])
    dR = np.array([[-np.sin(th), -np.cos(th)], [np.cos(th), -np.sin(th)]])
    G = np.zeros((kps.n_z, 3))
    for i, o in enumerate(np.asarray(kps.offsets)):
        G[2 * i: 2 * i + 2, :2] = np.eye(2)
        G[2 * i: 2 * i + 2, 2] = dR @ o
    return G


def expand_system(A_seq, B_seq, pose_traj, kps):
    """Expanded matrices ``[[A, 0], [C, 0]]`` and ``[B; D]`` with z = g(x) appended.

    ``C_t = G_{t+1} A_t[u rows]`` and ``D_t = G_{t+1} B_t[u rows]`` propagate the
    keypoint error through the next object pose.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    pose_traj = np.asarray(pose_traj, dtype=float)
    T, n = A_seq.shape[:2]
    m = B_seq.shape[2]
    if pose_traj.shape[0] != T + 1 or pose_traj.shape[1] < 3:
        raise ConfigurationError("pose_traj must hold T+1 SE(2) poses")
    nz = kps.n_z
    Ax = np.zeros((T, n + nz, n + nz))
    Bx = np.zeros((T, n + nz, m))
    for t in range(T):
        G = keypoint_jacobian(pose_traj[t + 1], kps)
        Ax[t, :n, :n] = A_seq[t]
        Ax[t, n:, :n] = G @ A_seq[t, :3, :]
        Bx[t, :n] = B_seq[t]
        Bx[t, n:] = G @ B_seq[t, :3, :]
    return Ax, Bx


def kp_lqr(A_seq, B_seq, pose_traj, kps, weights_expanded):
    """TVLQR on the expanded state ``[q_u; q_a; z]``."""
    Ax, Bx = expand_system(A_seq, B_seq, pose_traj, kps)
    n_s = Ax.shape[1]
    if weights_expanded.Q.shape != (n_s, n_s):
        raise ConfigurationError(
            f"expanded weights must be {n_s}x{n_s}, got {weights_expanded.Q.shape}"
        )
    return tvlqr(Ax, Bx, weights_expanded, layout="expanded",
                 n_x=np.asarray(A_seq).shape[1], keypoints=kps)


def kp_weights(n_u, n_a, n_p, Q=KP_Q, R=KP_R, QT=KP_QT):
    """Expanded-state weights in the layout ``[q_u; q_a; z]``.

    Each state vector is either already of length ``n_u + n_a + 2 n_p`` or in
    the published order ``[z (2 n_p); robot (uniform)]`` without object-pose
    entries, which are then zero.
    """
    n_x, n_z = n_u + n_a, 2 * n_p

    def state(d):
        d = np.asarray(d, dtype=float).ravel()
        if d.size == n_x + n_z:
            return d.copy()
        z, robot = d[:n_z], d[n_z:]
        if d.size > n_z and np.all(robot == robot[0]):
            return np.concatenate([np.zeros(n_u), np.full(n_a, robot[0]), z])
        raise ConfigurationError(
            f"cannot map {d.size} keypoint-LQR weights onto n_x={n_x}, n_z={n_z}"
        )

    R = np.asarray(R, dtype=float).ravel()
    if R.size != n_a:
        if not (R.size and np.all(R == R[0])):
            raise ConfigurationError(f"cannot map {R.size} input weights onto {n_a} inputs")
        R = np.full(n_a, R[0])
    return CostWeights(state(Q), R, state(QT))


def fold_keypoint_weights(Q_x, Q_z, n_p):
    """Vanilla-LQR state weight approximating a keypoint weight.

    Uses ``dz_i ~ [dx, dy]`` so the position block gains ``n_p Q_z``; the
    angle block is left alone.
    """
    Q = np.array(Q_x, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    Qz = np.asarray(Q_z, dtype=float)
    if Qz.ndim == 0:
        Qz = Qz * np.eye(2)
    elif Qz.ndim == 1:
        Qz = np.diag(Qz)
    if Qz.shape != (2, 2):
        raise ConfigurationError("Q_z must be a 2x2 per-keypoint weight")
    Q[:2, :2] += n_p * Qz
    return Q


def fold_weights(expanded, n_x, n_p):
    """Fold expanded :class:`CostWeights` back to the plain layout.

    The per-keypoint block is taken from the first keypoint.
    """
    parts = []
    for M in (expanded.Q, expanded.QT):
        parts.append(fold_keypoint_weights(M[:n_x, :n_x], M[n_x: n_x + 2, n_x: n_x + 2], n_p))
    return CostWeights(parts[0], expanded.R, parts[1])


def one_step_lqr(A_0, B_0, P_1, dx0):
    """``argmin_dv |A_0 dx0 + B_0 dv|^2_{P_1}`` with a tiny Tikhonov term."""
    A_0 = np.atleast_2d(np.asarray(A_0, dtype=float))
    B_0 = np.atleast_2d(np.asarray(B_0, dtype=float))
    P_1 = np.atleast_2d(np.asarray(P_1, dtype=float))
    dx0 = np.atleast_1d(np.asarray(dx0, dtype=float))
    H = B_0.T @ P_1 @ B_0
    H = H + ONE_STEP_REG * np.eye(H.shape[0])
    return -np.linalg.pinv(H) @ (B_0.T @ P_1 @ A_0 @ dx0)
