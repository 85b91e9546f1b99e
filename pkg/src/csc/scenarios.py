"""Built-in fixtures: a 1-D ball push and a planar cylinder pushed by two fingers."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import SceneModel, ShapeParam
from .errors import ConfigurationError
from .geometry import ContactPair, Disc, Point

# mass [kg], friction coefficient, radius [m], length [m]
CYLINDERS = {
    "a": (1.0, 0.5, 0.14, 0.5),
    "b": (1.0, 0.5, 0.13, 0.5),
    "c": (1.0, 0.5, 0.15, 0.5),
}

# Tracking weight vectors, laid out as [x, y, theta, robot...]; robot entries are
# broadcast to the scene's robot dimension by `adapt_diagonal`.
TRACK_Q = (10.0, 10.0, 10.0) + (0.1,) * 6
TRACK_R = (5.0,) * 6
TRACK_QT = (1000.0, 1000.0, 1000.0) + (0.1,) * 6
# KP-LQR weights in their published order [keypoints (8); robot (6)]
KP_Q = (5.0,) * 8 + (0.0,) * 6
KP_R = (100.0,) * 6
KP_QT = (20.0,) * 8 + (0.1,) * 6

KAPPA_PLAN = 1e5
KAPPA_GAIN = 800.0


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    dimensionality: str  # "line" | "SE2"
    object: dict
    finger: dict
    workspace: tuple  # ((lo, hi) per object position coordinate)
    x0: tuple
    weights: dict = field(default_factory=lambda: {
        "Q": TRACK_Q, "R": TRACK_R, "QT": TRACK_QT})
    kappa_plan: float = KAPPA_PLAN
    kappa_gain: float = KAPPA_GAIN
    v_bounds: tuple = None  # (lo, hi) applied to every robot command entry
    finger_clearance: float = 0.0

    def to_dict(self):
        d = asdict(self)
        return _listify(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["workspace"] = tuple(tuple(w) for w in d["workspace"])
        d["x0"] = tuple(d["x0"])
        d["weights"] = {k: tuple(v) for k, v in d["weights"].items()}
        if d.get("v_bounds") is not None:
            d["v_bounds"] = tuple(d["v_bounds"])
        return cls(**d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def adapt_diagonal(diag, n_u, n_a, what="Q"):
    """Map a weight diagonal onto a scene with `n_u` object and `n_a` robot DoFs.

    Accepts either an exact ``n_u + n_a`` vector or the nine-entry SE(2) layout
    ``[x, y, theta, robot...]`` with a uniform robot tail, which is broadcast.
    For R-type diagonals (`what="R"`) the vector covers only robot DoFs.
    """
    diag = np.asarray(diag, dtype=float).ravel()
    if what == "R":
        if diag.size == n_a:
            return diag.copy()
        if diag.size and np.all(diag == diag[0]):
            return np.full(n_a, diag[0])
        raise ConfigurationError(f"cannot map {diag.size} input weights onto {n_a} inputs")
    if diag.size == n_u + n_a:
        return diag.copy()
    if diag.size > 3:
        obj, tail = diag[:3], diag[3:]
        if np.all(tail == tail[0]):
            obj = obj[:n_u] if n_u <= 3 else None
            if obj is not None:
                return np.concatenate([obj, np.full(n_a, tail[0])])
    raise ConfigurationError(
        f"cannot map {diag.size} state weights onto n_u={n_u}, n_a={n_a}"
    )


def _get(opts, key, default):
    if opts is None:
        return default
    return opts.get(key, default)


def build_ball1d(opts=None):
    """Actuated point pushing a frictionless disc along a line.

    State ``x = [x_ball, x_point]``; defaults put the point at 0 and the ball
    (radius 0.1 m) centred at 0.2 m, i.e. a 0.1 m gap.
    """
    known = {"mass", "K_a", "h", "epsilon", "radius", "gap", "kappa"}
    if opts and set(opts) - known:
        raise ConfigurationError(f"unknown ball1d options {sorted(set(opts) - known)}")
    m = float(_get(opts, "mass", 1.0))
    k_a = float(_get(opts, "K_a", 100.0))
    h = float(_get(opts, "h", 0.1))
    eps = float(_get(opts, "epsilon", 1.0))
    r0 = float(_get(opts, "radius", 0.1))
    gap = float(_get(opts, "gap", 0.1))
    kappa = float(_get(opts, "kappa", KAPPA_PLAN))
    if m <= 0 or k_a <= 0 or gap < 0:
        raise ConfigurationError("mass and K_a must be positive, gap non-negative")

    def build(p):
        return SceneModel(
            h=h, epsilon=eps, M_u=[[m]], K_a=[k_a], tau_u=[0.0], tau_a=[0.0],
            bodies=(Disc("ball", p.radius, "u", (0,)), Point("pusher", "a", (0,))),
            pairs=(ContactPair("pusher", "ball", 0.0),),
            kappa=kappa, params=p, builder=build,
        )

    scene = build(ShapeParam(r0))
    spec = ScenarioSpec(
        name="ball1d", dimensionality="line",
        object={"mass": m, "mu": 0.0, "radius": r0, "length": 0.0},
        finger={"radius": 0.0, "K_a": k_a},
        workspace=((-1.0, 1.0),),
        x0=(r0 + gap, 0.0),
        v_bounds=(-1.0, 1.0),
    )
    return scene, spec


def build_planar_push(shape="a", opts=None):
    """Cylinder in SE(2) (state x, y, theta) between two 2-DoF disc fingers.

    State ``x = [x, y, theta, f1x, f1y, f2x, f2y]``.  The default start has the
    fingers 4 cm behind the cylinder (on the -x side), 0.6 rad either side of
    the push axis.
    """
    if shape not in CYLINDERS:
        raise ConfigurationError(f"unknown cylinder shape {shape!r}; expected a, b or c")
    known = {"finger_radius", "K_a", "h", "epsilon", "kappa", "gap", "spread"}
    if opts and set(opts) - known:
        raise ConfigurationError(f"unknown planar options {sorted(set(opts) - known)}")
    mass, mu, radius, length = CYLINDERS[shape]
    rf = float(_get(opts, "finger_radius", 0.02))
    k_a = float(_get(opts, "K_a", 100.0))
    h = float(_get(opts, "h", 0.1))
    eps = float(_get(opts, "epsilon", 1.0))
    kappa = float(_get(opts, "kappa", KAPPA_PLAN))
    gap = float(_get(opts, "gap", 0.04))
    spread = float(_get(opts, "spread", 0.6))

    def build(p):
        r = p.radius
        return SceneModel(
            h=h, epsilon=eps,
            M_u=np.diag([mass, mass, 0.5 * mass * r * r]),
            K_a=[k_a] * 4, tau_u=[0.0] * 3, tau_a=[0.0] * 4,
            bodies=(
                Disc("cylinder", r, "u", (0, 1), angle_dof=2),
                Disc("finger1", rf, "a", (0, 1)),
                Disc("finger2", rf, "a", (2, 3)),
            ),
            pairs=(ContactPair("cylinder", "finger1", mu),
                   ContactPair("cylinder", "finger2", mu)),
            kappa=kappa, params=p, builder=build,
        )

    scene = build(ShapeParam(radius))
    x0 = planar_start((0.0, 0.0, 0.0), np.pi, radius, rf, gap, spread)
    spec = ScenarioSpec(
        name=f"planar_push_{shape}", dimensionality="SE2",
        object={"mass": mass, "mu": mu, "radius": radius, "length": length},
        finger={"radius": rf, "K_a": k_a},
        workspace=((-0.5, 0.5), (-0.5, 0.5)),
        x0=tuple(float(v) for v in x0),
        v_bounds=(-0.8, 0.8),
        finger_clearance=2.0 * rf,
    )
    return scene, spec


def finger_offsets(direction, radius, rf, standoff, spread):
    """Finger centres relative to the cylinder centre.

    `direction` is the bearing (rad) of the side the fingers sit on;
    `standoff` is the surface gap (negative = commanded into the object).
    """
    d = radius + rf + standoff
    return [d * np.array([np.cos(direction + s), np.sin(direction + s)])
            for s in (-spread, spread)]


def planar_start(pose, direction, radius, rf, gap, spread):
    pose = np.asarray(pose, dtype=float)
    f1, f2 = finger_offsets(direction, radius, rf, gap, spread)
    return np.concatenate([pose, pose[:2] + f1, pose[:2] + f2])


PRESETS = {
    "ball1d": lambda opts=None: build_ball1d(opts),
    "planar_push_a": lambda opts=None: build_planar_push("a", opts),
    "planar_push_b": lambda opts=None: build_planar_push("b", opts),
    "planar_push_c": lambda opts=None: build_planar_push("c", opts),
}


def load_preset(name, opts=None):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown scenario preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name](opts)


def default_particles():
    """The three Table I cylinders, nominal shape first."""
    return [ShapeParam(CYLINDERS[k][2]) for k in ("a", "b", "c")]


def sample_push_task(seed, shape="a", T=None):
    """Random planar push towards the origin, seeded.

    Returns ``(x0, goal_pose, T)``.  Starts lie 0.15-0.3 m from the origin and
    T is drawn from [8, 16]; the fingers start behind the cylinder relative to
    the push direction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    _, spec = build_planar_push(shape)
    r, rf = spec.object["radius"], spec.finger["radius"]
    dist = rng.uniform(0.15, 0.3)
    bearing = rng.uniform(-np.pi, np.pi)
    start = np.array([dist * np.cos(bearing), dist * np.sin(bearing), 0.0])
    # fingers sit on the side facing away from the origin
    x0 = planar_start(start, bearing, r, rf, 0.04, 0.6)
    if T is None:
        T = int(rng.integers(8, 17))
    return x0, np.array([0.0, 0.0, 0.0]), T
