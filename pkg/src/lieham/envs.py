"""Ground-truth simulators, data collection and reference trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import qmc

from . import liegroup as lg
from .dynamics import (ConstantMatrix, InputMatrix, PortHamiltonianModel, Potential)
from .odeint import odeint_dopri5, odeint_rk4
from .training import TrajectoryDataset

GRAVITY = 9.81


def rot_z(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CollectionPlan:
    """How to excite an environment when building a dataset.

    ``excitation`` is ``"random_constant"`` (independent random start and
    constant input per segment) or ``"waypoint_pd"`` (a PD loop chasing
    random waypoints, sliced into consecutive segments).
    """

    n_segments: int
    horizon: int = 5
    dt: float = 0.05
    excitation: str = "random_constant"
    seed: int = 0
    n_runs: int = 1
    run_duration: float = 1.0
    noise: float = 0.0


# ------------------------------------------------------------ pendulum

@dataclass
class Pendulum:
    """Planar pendulum ``phi'' = -15 sin(phi) + 3 u - 0.2 phi'`` embedded in SO(3)
    as a rotation about the body z axis."""

    mass_inv: float = 3.0
    gravity_coeff: float = 5.0
    friction: float = 0.2
    input_gain: float = 1.0
    phi_dot_max: float = 6.0
    u_max: float = 2.0
    group: str = "SO3"
    m: int = 1

    @property
    def damping(self) -> float:
        return self.friction / self.mass_inv

    def truth_model(self, dissipation: bool = True) -> PortHamiltonianModel:
        Minv = self.mass_inv * np.eye(3)
        B = np.array([[0.0], [0.0], [self.input_gain]])
        D = ConstantMatrix(self.damping * np.eye(3)) if dissipation and self.friction else None
        return PortHamiltonianModel("SO3", 1, ConstantMatrix(Minv),
                                    Potential("SO3", None, {"kind": "cosine", "coeff": self.gravity_coeff}),
                                    InputMatrix(3, 1, None, B), D)

    def scalar_rhs(self, phi, phi_dot, u, dissipation: bool = True):
        sin = torch.sin if isinstance(phi, torch.Tensor) else np.sin
        acc = (-self.mass_inv * self.gravity_coeff * sin(phi)
               + self.mass_inv * self.input_gain * u)
        if dissipation:
            acc = acc - self.friction * phi_dot
        return acc

    def energy(self, phi, phi_dot):
        return 0.5 * phi_dot**2 / self.mass_inv + self.gravity_coeff * (1 - np.cos(phi))

    @staticmethod
    def to_state(phi, phi_dot) -> tuple[np.ndarray, np.ndarray]:
        phi, phi_dot = np.atleast_1d(phi), np.atleast_1d(phi_dot)
        q = np.stack([rot_z(f).reshape(-1) for f in phi])
        zeta = np.zeros((len(phi), 3))
        zeta[:, 2] = phi_dot
        return q, zeta

    @staticmethod
    def angle(q: np.ndarray) -> np.ndarray:
        q = np.asarray(q)
        return np.arctan2(q[..., 3], q[..., 0])

    def simulate(self, phi0, phi_dot0, u, t, dissipation: bool = True, rtol=1e-11, atol=1e-11):
        """Integrate the scalar ODE for a batch; returns ``(phi, phi_dot)`` of
        shape ``(len(t), batch)``."""
        u = torch.as_tensor(np.atleast_1d(np.asarray(u, dtype=float)))
        x0 = torch.tensor(np.stack([np.atleast_1d(phi0), np.atleast_1d(phi_dot0)], 1), dtype=torch.float64)

        def f(x):
            return torch.stack([x[:, 1], torch.as_tensor(
                self.scalar_rhs(x[:, 0], x[:, 1], u, dissipation))], 1)

        xs = torch.stack(odeint_dopri5(f, x0, t, rtol, atol)).numpy()
        return xs[..., 0], xs[..., 1]

    def collect(self, plan: CollectionPlan, dissipation: bool = True) -> TrajectoryDataset:
        if plan.excitation != "random_constant":
            raise ValueError("pendulum data uses random_constant excitation")
        rng = np.random.default_rng(plan.seed)
        D = plan.n_segments
        phi0 = rng.uniform(-np.pi, np.pi, D)
        dphi0 = rng.uniform(-self.phi_dot_max, self.phi_dot_max, D)
        u = rng.uniform(-self.u_max, self.u_max, D)
        t = np.arange(plan.horizon + 1) * plan.dt
        phi, dphi = self.simulate(phi0, dphi0, u, t, dissipation)
        q, zeta = self.to_state(phi.reshape(-1), dphi.reshape(-1))
        nt = len(t)
        return TrajectoryDataset(
            "SO3", np.tile(t, (D, 1)),
            q.reshape(nt, D, 9).transpose(1, 0, 2),
            zeta.reshape(nt, D, 3).transpose(1, 0, 2),
            u[:, None])

    def sample_states(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        h = qmc.Halton(2, seed=seed).random(n)
        return self.to_state(np.pi * (2 * h[:, 0] - 1), self.phi_dot_max * (2 * h[:, 1] - 1))


# ------------------------------------------------------------ SE(2) vehicle

@dataclass
class PlanarVehicle:
    """Fully actuated planar rigid body on SE(2)."""

    mass: float = 1.0
    inertia: float = 0.05
    drag: float = 0.0
    group: str = "SE2"
    m: int = 3

    def truth_model(self) -> PortHamiltonianModel:
        Minv = np.diag([1 / self.mass, 1 / self.mass, 1 / self.inertia])
        D = ConstantMatrix(self.drag * np.eye(3)) if self.drag else None
        return PortHamiltonianModel("SE2", 3, ConstantMatrix(Minv), Potential("SE2"),
                                    InputMatrix(3, 3, None, np.eye(3)), D)

    @staticmethod
    def to_state(x, y, yaw, vx=0.0, vy=0.0, w=0.0):
        c, s = np.cos(yaw), np.sin(yaw)
        q = np.stack(np.broadcast_arrays(x, y, c, -s, s, c), -1)
        zeta = np.stack(np.broadcast_arrays(vx, vy, w), -1).astype(float)
        return q.astype(float), zeta

    def _pd(self, q, zeta, target, rng, noise):
        # body-frame PD toward a target pose (x, y, yaw)
        R = q[:, 2:].reshape(-1, 2, 2)
        yaw = np.arctan2(R[:, 1, 0], R[:, 0, 0])
        ep = target[:, :2] - q[:, :2]
        f_world = 4.0 * ep - 3.0 * np.einsum("bij,bj->bi", R, zeta[:, :2])
        f_body = np.einsum("bji,bj->bi", R, f_world)
        eyaw = np.angle(np.exp(1j * (target[:, 2] - yaw)))
        tau = 0.4 * eyaw - 0.25 * zeta[:, 2]
        u = np.concatenate([f_body, tau[:, None]], 1)
        return u + noise * rng.normal(size=u.shape)

    def collect(self, plan: CollectionPlan) -> TrajectoryDataset:
        return _collect_pd(self, plan, self._random_start, self._random_target, self._pd)

    def _random_start(self, rng, n):
        q, z = self.to_state(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(-np.pi, np.pi, n),
                             rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), rng.uniform(-1, 1, n))
        return q, z

    def _random_target(self, rng, n):
        return np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n), rng.uniform(-np.pi, np.pi, n)], 1)

    def sample_states(self, n: int, seed: int = 0):
        h = qmc.Halton(6, seed=seed).random(n)
        return self.to_state(3 * h[:, 0] - 1.5, 3 * h[:, 1] - 1.5, np.pi * (2 * h[:, 2] - 1),
                             2 * h[:, 3] - 1, 2 * h[:, 4] - 1, 4 * h[:, 5] - 2)


# ------------------------------------------------------------ quadrotor

@dataclass
class Quadrotor:
    """Rigid quadrotor on SE(3); inputs are collective thrust along body z
    (N) and body torques in units of ``torque_unit`` N m."""

    mass: float = 0.027
    inertia: tuple = (1.4e-5, 1.4e-5, 2.2e-5)
    gravity: float = GRAVITY
    torque_unit: float = 1e-3
    drag: tuple | None = None
    group: str = "SE3"
    m: int = 4

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.inertia)

    def input_matrix(self) -> np.ndarray:
        B = np.zeros((6, 4))
        B[2, 0] = 1.0
        B[3:, 1:] = self.torque_unit * np.eye(3)
        return B

    def truth_model(self, dissipation: bool = True) -> PortHamiltonianModel:
        Minv = np.diag([1 / self.mass] * 3 + [1 / j for j in self.inertia])
        D = None
        if dissipation and self.drag is not None:
            D = ConstantMatrix(np.diag(self.drag))
        pot = Potential("SE3", None, {"kind": "height", "coeff": self.mass * self.gravity})
        return PortHamiltonianModel("SE3", 4, ConstantMatrix(Minv), pot,
                                    InputMatrix(6, 4, None, self.input_matrix()), D)

    @property
    def hover_input(self) -> np.ndarray:
        return np.array([self.mass * self.gravity, 0.0, 0.0, 0.0])

    @staticmethod
    def to_state(pos, R, v, w):
        pos, R, v, w = (np.asarray(a, dtype=float) for a in (pos, R, v, w))
        q = np.concatenate([pos, R.reshape(*R.shape[:-2], 9)], -1)
        return q, np.concatenate([v, w], -1)

    def geometric_pd(self, q, zeta, target, rng=None, noise=0.0, gains=(1.2, 1.2, 0.0025, 0.0006)):
        """Gentle geometric position controller (fixed yaw) used to collect data."""
        kp, kd, kr, kw = gains
        pos, R = q[:, :3], q[:, 3:].reshape(-1, 3, 3)
        v, w = zeta[:, :3], zeta[:, 3:]
        vel = np.einsum("bij,bj->bi", R, v)
        F = self.mass * (kp * (target - pos) - kd * vel + np.array([0, 0, self.gravity]))
        thrust = np.einsum("bi,bi->b", F, R[:, :, 2])
        b3 = F / np.linalg.norm(F, axis=1, keepdims=True)
        b1 = np.cross(np.array([0.0, 1.0, 0.0]), b3)
        b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
        Rd = np.stack([b1, np.cross(b3, b1), b3], -1)
        E = np.einsum("bji,bjk->bik", Rd, R)
        eR = 0.5 * np.stack([E[:, 2, 1] - E[:, 1, 2], E[:, 0, 2] - E[:, 2, 0], E[:, 1, 0] - E[:, 0, 1]], 1)
        tau = (-kr * eR - kw * w) / self.torque_unit
        u = np.concatenate([thrust[:, None], tau], 1)
        if noise and rng is not None:
            scale = np.array([0.1 * self.mass * self.gravity, 0.3, 0.3, 0.3])
            u = u + noise * scale * rng.normal(size=u.shape)
        return u

    def _random_start(self, rng, n):
        pos = rng.uniform([-1, -1, 0.5], [1, 1, 1.5], (n, 3))
        R = np.stack([lg.so3_exp(rng.normal(size=3) * 0.2) for _ in range(n)])
        return self.to_state(pos, R, rng.normal(size=(n, 3)) * 0.2, rng.normal(size=(n, 3)) * 0.5)

    def _random_target(self, rng, n):
        return rng.uniform([-1, -1, 0.5], [1, 1, 1.5], (n, 3))

    def collect(self, plan: CollectionPlan) -> TrajectoryDataset:
        if plan.excitation == "random_constant":
            rng = np.random.default_rng(plan.seed)
            q, z = self._random_start(rng, plan.n_segments)
            u = self.hover_input + np.array([0.3 * self.mass * self.gravity, 0.5, 0.5, 0.5]) * rng.uniform(
                -1, 1, (plan.n_segments, 4))
            return _simulate_segments(self, q, z, u, plan)
        return _collect_pd(self, plan, self._random_start, self._random_target, self.geometric_pd)

    def sample_states(self, n: int, seed: int = 0):
        h = qmc.Halton(12, seed=seed).random(n)
        pos = np.array([-1, -1, 0.5]) + h[:, :3] * np.array([2, 2, 1])
        R = np.stack([lg.so3_exp(0.5 * (2 * r - 1)) for r in h[:, 3:6]])
        return self.to_state(pos, R, 2 * h[:, 6:9] - 1, 2 * h[:, 9:] - 1)


# ------------------------------------------------------------ collection helpers

def _simulate_segments(env, q, zeta, u, plan: CollectionPlan) -> TrajectoryDataset:
    model = env.truth_model()
    t = np.arange(plan.horizon + 1) * plan.dt
    ut = torch.as_tensor(u)
    with torch.no_grad():
        x0 = model.encode(torch.as_tensor(q), torch.as_tensor(zeta))
        xs = odeint_dopri5(lambda x: model.flow(x, ut), x0, t, 1e-11, 1e-11)
        qs, zs = zip(*[model.decode(x) for x in xs])
    Q = torch.stack(qs, 1).numpy()
    Z = torch.stack(zs, 1).numpy()
    return TrajectoryDataset(env.group, np.tile(t, (len(q), 1)), Q, Z, np.asarray(u, dtype=float))


def _collect_pd(env, plan: CollectionPlan, start, target, policy) -> TrajectoryDataset:
    """Run ``n_runs`` PD episodes in parallel and slice them into segments
    of ``horizon`` steps with the input held over each segment."""
    rng = np.random.default_rng(plan.seed)
    per_run = plan.n_segments // plan.n_runs
    if per_run * plan.n_runs != plan.n_segments:
        raise ValueError("n_segments must be a multiple of n_runs")
    model = env.truth_model()
    q, z = start(rng, plan.n_runs)
    goal = target(rng, plan.n_runs)
    seg_t = np.arange(plan.horizon + 1) * plan.dt
    switch = max(1, per_run // 4)
    out_q, out_z, out_u, out_t = [], [], [], []
    with torch.no_grad():
        x = model.encode(torch.as_tensor(q), torch.as_tensor(z))
        for k in range(per_run):
            if k and k % switch == 0:
                goal = target(rng, plan.n_runs)
            qn, zn = (a.numpy() for a in model.decode(x))
            u = policy(qn, zn, goal, rng, plan.noise)
            ut = torch.as_tensor(u)
            xs = odeint_dopri5(lambda s: model.flow(s, ut), x, seg_t, 1e-11, 1e-11)
            qs, zs = zip(*[model.decode(s) for s in xs])
            out_q.append(torch.stack(qs, 1).numpy())
            out_z.append(torch.stack(zs, 1).numpy())
            out_u.append(u)
            out_t.append(np.tile(seg_t + k * seg_t[-1], (plan.n_runs, 1)))
            x = xs[-1]
    return TrajectoryDataset(env.group, np.concatenate(out_t), np.concatenate(out_q),
                             np.concatenate(out_z), np.concatenate(out_u))


ENVS = {"pendulum": Pendulum, "se2": PlanarVehicle, "quadrotor": Quadrotor}


def make_env(name: str, **params):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)


def default_plan(name: str, seed: int = 0) -> CollectionPlan:
    if name == "pendulum":
        return CollectionPlan(5120, 5, 0.05, "random_constant", seed)
    if name == "se2":
        return CollectionPlan(432, 5, 1 / 240, "waypoint_pd", seed, n_runs=9, run_duration=1.0, noise=0.2)
    if name == "quadrotor":
        return CollectionPlan(1080, 5, 1 / 120, "waypoint_pd", seed, n_runs=18, run_duration=2.5, noise=0.3)
    raise ValueError(name)


# ------------------------------------------------------------ references

@dataclass
class Reference:
    """Smooth position/yaw reference with analytic derivatives."""

    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, t: float) -> dict:
        return reference_trajectory(self.kind, t, self.params)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s * s), 30 * s * s * (1 - s) ** 2, 60 * s * (1 - 3 * s + 2 * s * s)


def _smooth_ramp(tau, w):
    """Smoothed ``max(tau, 0)`` over a window ``w`` centred at zero.

    Returns value, first and second derivative in ``tau``."""
    s = tau / w + 0.5
    if s <= 0:
        return 0.0, 0.0, 0.0
    if s >= 1:
        return tau, 1.0, 0.0
    S, dS, _ = _smoothstep(s)
    # integral of the quintic smoothstep from 0 to s
    IS = s**4 * (2.5 - 3 * s + s * s)
    return w * IS, S, dS / w


def _piecewise(t, waypoints, durations, blend):
    W = np.asarray(waypoints, dtype=float)
    T = np.concatenate([[0.0], np.cumsum(durations)]) + 0.5 * blend
    vel = np.diff(W, axis=0) / np.asarray(durations, dtype=float)[:, None]
    dv = np.diff(np.vstack([np.zeros(W.shape[1]), vel, np.zeros(W.shape[1])]), axis=0)
    p, dp, ddp = W[0].copy(), np.zeros(W.shape[1]), np.zeros(W.shape[1])
    for Tk, dvk in zip(T, dv):
        r, dr, ddr = _smooth_ramp(t - Tk, blend)
        p += dvk * r
        dp += dvk * dr
        ddp += dvk * ddr
    return p, dp, ddp


def reference_trajectory(kind: str, t: float, params: dict | None = None) -> dict:
    """Reference ``p, dp, ddp, psi, dpsi, ddpsi`` at time ``t``.

    Kinds: ``vertical_circle``, ``vertical_lemniscate``,
    ``horizontal_lemniscate``, ``piecewise_linear`` and ``diamond``. The
    piecewise paths blend velocity at each corner with a quintic over
    ``blend`` seconds (default 0.2) and start and end at rest.
    """
    P = dict(params or {})
    c = np.asarray(P.get("center", [0.0, 0.0, 1.0]), dtype=float)
    rate = float(P.get("rate", 0.5))
    a = float(P.get("size", 0.5))
    s, co = np.sin(rate * t), np.cos(rate * t)
    s2, c2 = np.sin(2 * rate * t), np.cos(2 * rate * t)
    z3 = np.zeros(3)
    if kind == "vertical_circle":
        p = c + a * np.array([co, 0.0, s])
        dp = a * rate * np.array([-s, 0.0, co])
        ddp = -a * rate**2 * np.array([co, 0.0, s])
    elif kind in ("vertical_lemniscate", "horizontal_lemniscate"):
        k = 2 if kind == "vertical_lemniscate" else 1
        p, dp, ddp = c.copy(), z3.copy(), z3.copy()
        p[0] += a * s
        dp[0] += a * rate * co
        ddp[0] -= a * rate**2 * s
        p[k] += 0.5 * a * s2
        dp[k] += a * rate * c2
        ddp[k] -= 2 * a * rate**2 * s2
    elif kind in ("piecewise_linear", "diamond"):
        blend = float(P.get("blend", 0.2))
        if kind == "diamond":
            leg = float(P.get("leg_time", 2.5))
            W = [c + np.array(v) * a for v in
                 ([0, 0, -1], [1, 1, 0], [0, 0, 1], [-1, -1, 0], [0, 0, -1])]
            dur = [leg] * 4
        else:
            W = P["waypoints"]
            dur = P["durations"]
        p, dp, ddp = _piecewise(t, W, dur, blend)
    else:
        raise ValueError(f"unknown reference {kind!r}")
    amp, yrate = float(P.get("yaw_amp", 0.0)), float(P.get("yaw_rate", rate))
    psi = float(P.get("yaw0", 0.0)) + amp * np.sin(yrate * t)
    dpsi = amp * yrate * np.cos(yrate * t)
    ddpsi = -amp * yrate**2 * np.sin(yrate * t)
    return {"p": p, "dp": dp, "ddp": ddp, "psi": psi, "dpsi": dpsi, "ddpsi": ddpsi}


def reference_duration(kind: str, params: dict | None = None) -> float:
    P = params or {}
    if kind == "diamond":
        return 4 * float(P.get("leg_time", 2.5)) + float(P.get("blend", 0.2))
    if kind == "piecewise_linear":
        return float(np.sum(P["durations"])) + float(P.get("blend", 0.2))
    return 2 * np.pi / float(P.get("rate", 0.5))


def rk4_truth(env, q0, zeta0, u, t, substeps=10):
    """Fixed-step reference integration of the ground-truth model."""
    model = env.truth_model()
    ut = torch.as_tensor(np.atleast_2d(u))
    with torch.no_grad():
        x0 = model.encode(torch.as_tensor(np.atleast_2d(q0)), torch.as_tensor(np.atleast_2d(zeta0)))
        return odeint_rk4(lambda x: model.flow(x, ut), x0, t, substeps)
