"""Two double-integrator robots under a centralized ZCBF-constrained QP.

The scenario state is relative: ``[dpx, dpy, v0x, v0y, v1x, v1y]`` with
``dp = p1 - p0`` (the subject robot, index 0, sits at the origin).  Absolute
positions live in the per-run simulation state; goals are sampled in the
absolute frame and held for the whole run.

Barrier: ``h = sqrt(2 a_br (|dp| - D_s)) + dp.dv / |dp|`` with ``dv = v1 - v0``
and class-K term ``gamma h^3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from almostsafe.errors import ConfigurationError
from almostsafe.qp import LinearConstraint, project_one_fast
from almostsafe.scenario import DomainBox, ScenarioSystem, compose_scenario

_SING = 1e-12


@dataclass(frozen=True)
class CbfParams:
    a_br: float = 2.0
    gamma: float = 1.0
    d_s: float = 1.0
    a_max: float = 1.0
    v_max: float = 1.0
    dt: float = 0.1
    kp: float = 1.0
    kv: float = 2.0
    pred_sigma: float = 0.1
    pos_bound: float = 10.0
    tau_min: float = 0.2
    tau_max: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "pred_sigma" and getattr(self, f.name) <= 0:
                raise ConfigurationError(f"cbf parameter {f.name} must be positive")
        if self.pred_sigma < 0:
            raise ConfigurationError("pred_sigma must be non-negative")
        if self.tau_min > self.tau_max:
            raise ConfigurationError("tau_min exceeds tau_max")

    @property
    def domain(self) -> DomainBox:
        p, v = self.pos_bound, self.v_max
        return DomainBox([-p, -p, -v, -v, -v, -v], [p, p, v, v, v, v])


# -- barrier ---------------------------------------------------------------

def barrier_value(dp, dv, params: CbfParams = CbfParams()) -> float:
    dx, dy = float(dp[0]), float(dp[1])
    d = math.hypot(dx, dy)
    if d < _SING:
        raise ZeroDivisionError("barrier undefined at coincident positions")
    return math.sqrt(2 * params.a_br * max(d - params.d_s, 0.0)) + (dx * dv[0] + dy * dv[1]) / d


def barrier_gradient(dp, dv, params: CbfParams = CbfParams()):
    """Partial derivatives ``(dh/ddp, dh/ddv)``, each a length-2 array."""
    dx, dy = float(dp[0]), float(dp[1])
    vx, vy = float(dv[0]), float(dv[1])
    d = math.hypot(dx, dy)
    gap = max(d - params.d_s, _SING)
    radial = params.a_br / math.sqrt(2 * params.a_br * gap)
    proj = (dx * vx + dy * vy) / d
    gp = np.array(
        [radial * dx / d + (vx - proj * dx / d) / d, radial * dy / d + (vy - proj * dy / d) / d]
    )
    return gp, np.array([dx / d, dy / d])


def _constraint_terms(dx, dy, vx, vy, p: CbfParams):
    """Return ``(nx, ny, bound, h)`` for the constraint ``n.(a1 - a0) >= bound``."""
    d = math.hypot(dx, dy)
    if d <= p.d_s or d < _SING:
        return None
    nx, ny = dx / d, dy / d
    proj = nx * vx + ny * vy
    root = math.sqrt(2 * p.a_br * (d - p.d_s))
    h = root + proj
    radial = p.a_br / root
    # L_f h: gradient wrt dp applied to dv
    lfh = radial * proj + (vx * vx + vy * vy - proj * proj) / d
    return nx, ny, -p.gamma * h**3 - lfh, h


def cbf_constraint(state, params: CbfParams = CbfParams()) -> LinearConstraint | None:
    """Linear constraint over ``(a0x, a0y, a1x, a1y)``; ``None`` at singular states."""
    dx, dy, v0x, v0y, v1x, v1y = (float(v) for v in state)
    terms = _constraint_terms(dx, dy, v1x - v0x, v1y - v0y, params)
    if terms is None:
        return None
    nx, ny, bound, _ = terms
    return LinearConstraint(np.array([-nx, -ny, nx, ny]), bound)


# -- reference actions -------------------------------------------------------

def _clip(v, m):
    return -m if v < -m else (m if v > m else v)


def goal_reference(p, v, goal, params: CbfParams = CbfParams()):
    return np.array(_goal_ref(p[0], p[1], v[0], v[1], goal[0], goal[1], params))


def _goal_ref(px, py, vx, vy, gx, gy, p: CbfParams):
    return (
        _clip(p.kp * (gx - px) - p.kv * vx, p.a_max),
        _clip(p.kp * (gy - py) - p.kv * vy, p.a_max),
    )


def braking_reference(v, params: CbfParams = CbfParams()):
    return np.array([_clip(-v[0] / params.dt, params.a_max), _clip(-v[1] / params.dt, params.a_max)])


def predictive_target(p0, v0, tau):
    return np.asarray(p0, dtype=float) + tau * np.asarray(v0, dtype=float)


def predictive_reference(subject_p, subject_v, other_p, other_v, tau, gen, params: CbfParams = CbfParams()):
    """Pursue the subject's constant-velocity extrapolation, plus Gaussian jitter."""
    tx, ty = subject_p[0] + tau * subject_v[0], subject_p[1] + tau * subject_v[1]
    ax, ay = _goal_ref(other_p[0], other_p[1], other_v[0], other_v[1], tx, ty, params)
    if params.pred_sigma > 0:
        nx, ny = gen.normal(0.0, params.pred_sigma, 2)
        ax, ay = ax + nx, ay + ny
    return np.array([_clip(ax, params.a_max), _clip(ay, params.a_max)])


# -- dynamics ----------------------------------------------------------------

def env_step(x, a0, a1, dt):
    """Zero-order-hold double-integrator step for both robots.

    ``x = [p0x, p0y, v0x, v0y, p1x, p1y, v1x, v1y]`` in the absolute frame.
    """
    p0x, p0y, v0x, v0y, p1x, p1y, v1x, v1y = x
    h = 0.5 * dt * dt
    return [
        p0x + v0x * dt + h * a0[0],
        p0y + v0y * dt + h * a0[1],
        v0x + a0[0] * dt,
        v0y + a0[1] * dt,
        p1x + v1x * dt + h * a1[0],
        p1y + v1y * dt + h * a1[1],
        v1x + a1[0] * dt,
        v1y + a1[1] * dt,
    ]


def relative_state(x, pos_bound):
    dx = _clip(x[4] - x[0], pos_bound)
    dy = _clip(x[5] - x[1], pos_bound)
    return np.array([dx, dy, x[2], x[3], x[6], x[7]])


class CollisionRegion:
    """Failure set ``|dp| <= D_s``."""

    def __init__(self, d_s: float):
        self.d_s = d_s

    def __call__(self, s) -> bool:
        return s[0] * s[0] + s[1] * s[1] <= self.d_s * self.d_s

    def batch(self, S):
        S = np.atleast_2d(S)
        return S[:, 0] ** 2 + S[:, 1] ** 2 <= self.d_s**2


class RobotPairEnv:
    """Both robots' absolute states; observed through the clipped relative frame."""

    action_dim = 4
    exit_policy = ("saturate",) * 6

    def __init__(self, params: CbfParams = CbfParams()):
        self.params = params
        self.domain = params.domain
        self.failure = CollisionRegion(params.d_s)
        # |ddp| <= dt (|dv| + |dv+|)/2 <= 2 v_max dt; |dv_i| <= a_max dt
        pos = 2 * params.v_max * params.dt + params.a_max * params.dt**2
        vel = params.a_max * params.dt
        self.step_bound = np.array([pos, pos, vel, vel, vel, vel])

    def reset(self, s0, gen):
        return [0.0, 0.0, float(s0[2]), float(s0[3]), float(s0[0]), float(s0[1]), float(s0[4]), float(s0[5])]

    def step(self, x, action, gen):
        return env_step(x, action[0:2], action[2:4], self.params.dt)

    def observe(self, x):
        return relative_state(x, self.params.pos_bound)


@dataclass
class RunContext:
    goal0: tuple
    goal1: tuple
    tau: float
    infeasible: int = 0


class CbfPolicy:
    """Centralized QP controller emitting both robots' accelerations.

    ``kind="cbf"``: the other robot runs the same goal-to-goal reference as
    the subject.  ``kind="pred"``: it pursues the subject's predicted
    position.  Both share the same constraint set (barrier condition, action
    box, and the velocity box implied by ``v_max``).
    """

    state_dim = 6
    action_dim = 4

    def __init__(self, kind: str = "cbf", params: CbfParams = CbfParams(), goal_bound: float | None = None):
        if kind not in ("cbf", "pred"):
            raise ConfigurationError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.params = params
        self.goal_bound = params.pos_bound if goal_bound is None else goal_bound

    def reset(self, x, gen):
        g = self.goal_bound
        goal0 = tuple(gen.uniform(-g, g, 2))
        goal1 = tuple(gen.uniform(-g, g, 2))
        tau = float(gen.uniform(self.params.tau_min, self.params.tau_max))
        return RunContext(goal0, goal1, tau)

    def references(self, x, ctx: RunContext, gen):
        p = self.params
        p0x, p0y, v0x, v0y, p1x, p1y, v1x, v1y = x
        a0 = _goal_ref(p0x, p0y, v0x, v0y, ctx.goal0[0], ctx.goal0[1], p)
        if self.kind == "cbf":
            a1 = _goal_ref(p1x, p1y, v1x, v1y, ctx.goal1[0], ctx.goal1[1], p)
        else:
            a1 = tuple(predictive_reference((p0x, p0y), (v0x, v0y), (p1x, p1y), (v1x, v1y), ctx.tau, gen, p))
        return [a0[0], a0[1], a1[0], a1[1]]

    def box(self, x):
        """Action box tightened so that every velocity stays within ``v_max``."""
        p = self.params
        lo, hi = [], []
        for v in (x[2], x[3], x[6], x[7]):
            lo.append(max(-p.a_max, (-p.v_max - v) / p.dt))
            hi.append(min(p.a_max, (p.v_max - v) / p.dt))
        return lo, hi

    def act(self, x, ctx: RunContext, gen):
        p = self.params
        a_ref = self.references(x, ctx, gen)
        lo, hi = self.box(x)
        terms = _constraint_terms(x[4] - x[0], x[5] - x[1], x[6] - x[2], x[7] - x[3], p)
        sol = None
        if terms is not None:
            nx, ny, bound, _ = terms
            sol = project_one_fast(a_ref, [-nx, -ny, nx, ny], bound, lo, hi)
        if sol is None:
            ctx.infeasible += 1
            sol = [_clip(-v / p.dt, p.a_max) for v in (x[2], x[3], x[6], x[7])]
        return sol


def cbf_scenario(kind: str = "cbf", params: CbfParams = CbfParams()) -> ScenarioSystem:
    return compose_scenario(RobotPairEnv(params), CbfPolicy(kind, params), name=f"cbf-{kind}")
