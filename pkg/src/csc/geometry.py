"""Rigid primitives and the contact kernel (signed distances and Jacobians).

Bodies live either on a line (one coordinate) or in the plane (two
coordinates plus an optional angle).  Coordinates are addressed by *global*
indices into the stacked state ``x = [q_u; q_a]``.

Sign convention: ``J_n @ xdot`` is the rate of change of the gap, so a
positive value means the pair is separating.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateGeometryError

PENETRATION_CAP = 1e-3

_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class Disc:
    """A disc (or a segment on a line) whose centre is given by `dofs`.

    `block` is ``"u"`` for object DoFs and ``"a"`` for robot DoFs; `dofs` and
    `angle_dof` are indices local to that block.
    """

    name: str
    radius: float
    block: str
    dofs: tuple
    angle_dof: int = None


@dataclass(frozen=True)
class Point:
    name: str
    block: str
    dofs: tuple


@dataclass(frozen=True)
class HalfPlane:
    """Static wall; the free side is ``{p : normal . p >= offset}``."""

    name: str
    normal: tuple
    offset: float = 0.0


@dataclass(frozen=True)
class ContactPair:
    first: str
    second: str
    mu: float = 0.0


@dataclass
class ContactInfo:
    phi: float
    J_n: np.ndarray
    J_t: np.ndarray
    mu: float
    pair_id: int
    # dJ[r, j, k] = d J[r, j] / d x_k with J = [J_n; J_t]
    dJ: np.ndarray = field(default=None, repr=False)

    @property
    def t_dim(self):
        return self.J_t.shape[0]

    @property
    def J(self):
        return np.vstack([self.J_n[None, :], self.J_t])


def _round_body(body, n_u):
    """(centre indices, radius, angle index) in global coordinates."""
    off = 0 if body.block == "u" else n_u
    idx = tuple(off + i for i in body.dofs)
    if isinstance(body, Disc):
        ang = None if body.angle_dof is None else off + body.angle_dof
        return idx, float(body.radius), ang
    return idx, 0.0, None


def _check_body(body):
    if isinstance(body, HalfPlane):
        return
    if body.block not in ("u", "a"):
        raise ConfigurationError(f"body {body.name!r}: block must be 'u' or 'a'")
    if len(body.dofs) not in (1, 2):
        raise ConfigurationError(f"body {body.name!r}: expected 1 or 2 centre dofs")
    if isinstance(body, Disc) and not body.radius > 0:
        raise ConfigurationError(f"disc {body.name!r}: radius must be positive")


def contact_kernel(scene, q, with_derivatives=False):
    """Evaluate every declared contact pair of `scene` at configuration `q`.

    Returns a list of :class:`ContactInfo`, one per pair in declaration order.
    With ``with_derivatives=True`` each entry also carries ``dJ``, the
    configuration derivative of the stacked Jacobian.
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    bodies = scene.body_map
    out = []
    for pid, pair in enumerate(scene.pairs):
        a, b = bodies[pair.first], bodies[pair.second]
        if isinstance(a, HalfPlane) and not isinstance(b, HalfPlane):
            a, b = b, a
        if isinstance(b, HalfPlane):
            if not isinstance(a, Disc) or len(a.dofs) != 2:
                raise ConfigurationError(
                    f"pair {pid}: only planar disc / half-plane contacts are supported"
                )
            info = _disc_wall(a, b, q, n, scene.n_u, pair.mu, pid, with_derivatives)
        else:
            ca, ra, aa = _round_body(a, scene.n_u)
            cb, rb, ab = _round_body(b, scene.n_u)
            if len(ca) != len(cb):
                raise ConfigurationError(f"pair {pid}: mixed line / planar bodies")
            if len(ca) == 1:
                info = _line_pair(ca[0], ra, cb[0], rb, q, n, pid, with_derivatives)
            else:
                if isinstance(a, Point) and isinstance(b, Point):
                    raise ConfigurationError(
                        f"pair {pid}: point / point contact is only supported on a line"
                    )
                info = _planar_pair(ca, ra, aa, cb, rb, ab, q, n, pair.mu, pid,
                                    with_derivatives)
        if info.phi <= -PENETRATION_CAP:
            raise DegenerateGeometryError(
                f"pair {pid} ({pair.first}/{pair.second}) overlaps by {-info.phi:.3g} m"
            )
        out.append(info)
    return out


def _line_pair(ia, ra, ib, rb, q, n, pid, with_derivatives):
    s = 1.0 if q[ib] >= q[ia] else -1.0
    J_n = np.zeros(n)
    J_n[ib] += s
    J_n[ia] -= s
    phi = s * (q[ib] - q[ia]) - ra - rb
    dJ = np.zeros((1, n, n)) if with_derivatives else None
    return ContactInfo(phi, J_n, np.zeros((0, n)), 0.0, pid, dJ)


def _planar_pair(ca, ra, aa, cb, rb, ab, q, n, mu, pid, with_derivatives):
    ca, cb = list(ca), list(cb)
    d = q[cb] - q[ca]
    dist = float(np.hypot(d[0], d[1]))
    if dist < 1e-12:
        raise DegenerateGeometryError(f"pair {pid}: coincident centres")
    nrm = d / dist
    tan = _ROT90 @ nrm
    J_n = np.zeros(n)
    J_n[cb] += nrm
    J_n[ca] -= nrm
    t_dim = 1 if mu > 0 else 0
    J_t = np.zeros((t_dim, n))
    if t_dim:
        J_t[0, cb] += tan
        J_t[0, ca] -= tan
        if aa is not None:
            J_t[0, aa] -= ra
        if ab is not None:
            J_t[0, ab] -= rb
    dJ = None
    if with_derivatives:
        dJ = np.zeros((1 + t_dim, n, n))
        dn = (np.eye(2) - np.outer(nrm, nrm)) / dist  # dn/dd
        dt = _ROT90 @ dn
        for r, blk in ((0, dn), (1, dt))[: 1 + t_dim]:
            # rows of J at cb carry +vec(d), at ca -vec(d); d = c_b - c_a
            for i in range(2):
                for j in range(2):
                    v = blk[i, j]
                    dJ[r, cb[i], cb[j]] += v
                    dJ[r, cb[i], ca[j]] -= v
                    dJ[r, ca[i], cb[j]] -= v
                    dJ[r, ca[i], ca[j]] += v
    return ContactInfo(dist - ra - rb, J_n, J_t, float(mu) if t_dim else 0.0, pid, dJ)


def _disc_wall(disc, wall, q, n, n_u, mu, pid, with_derivatives):
    c, r, ang = _round_body(disc, n_u)
    c = list(c)
    nw = np.asarray(wall.normal, dtype=float)
    nw = nw / np.linalg.norm(nw)
    tw = _ROT90 @ nw
    J_n = np.zeros(n)
    J_n[c] = nw
    t_dim = 1 if mu > 0 else 0
    J_t = np.zeros((t_dim, n))
    if t_dim:
        J_t[0, c] = tw
        if ang is not None:
            J_t[0, ang] = -r
    phi = float(nw @ q[c]) - wall.offset - r
    dJ = np.zeros((1 + t_dim, n, n)) if with_derivatives else None
    return ContactInfo(phi, J_n, J_t, float(mu) if t_dim else 0.0, pid, dJ)
