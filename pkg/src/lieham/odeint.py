"""ODE integration, rollouts and loss gradients.

Models follow a small protocol: ``encode(q, zeta) -> x``,
``flow(x, u) -> x_dot`` and ``decode(x) -> (q, zeta)``. The control input
is held constant over each call (zero-order hold).
"""

from __future__ import annotations

import csv
import math
from typing import Callable

import numpy as np
import torch

Flow = Callable[[torch.Tensor], torch.Tensor]


class IntegrationError(RuntimeError):
    pass


def rk4_step(f: Flow, x: torch.Tensor, h: float) -> torch.Tensor:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def odeint_rk4(f: Flow, x0: torch.Tensor, t, substeps: int = 1) -> list[torch.Tensor]:
    """Fixed-step RK4 with ``substeps`` equal steps per grid interval."""
    t = [float(v) for v in t]
    xs = [x0]
    x = x0
    for a, b in zip(t[:-1], t[1:]):
        h = (b - a) / substeps
        for _ in range(substeps):
            x = rk4_step(f, x, h)
        xs.append(x)
    return xs


# Dormand-Prince 5(4) tableau
_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
_E = [b5 - b4 for b5, b4 in zip(_B5, _B4)]


def dopri5_step(f: Flow, x: torch.Tensor, h: float, k1: torch.Tensor | None = None):
    """One Dormand-Prince step. Returns ``(x_new, err, k_last)``."""
    k = [f(x) if k1 is None else k1]
    for i in range(1, 7):
        dx = sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(f(x + h * dx))
    x_new = x + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
    return x_new, err, k[6]


def _err_norm(err, x0, x1, rtol, atol):
    scale = atol + rtol * torch.maximum(x0.abs(), x1.abs())
    r = (err / scale).reshape(err.shape[0], -1)
    return float(torch.sqrt((r * r).mean(1)).max())


def odeint_dopri5(f: Flow, x0: torch.Tensor, t, rtol: float = 1e-8, atol: float = 1e-8,
                  h0: float | None = None, max_steps: int = 1_000_000) -> list[torch.Tensor]:
    """Adaptive Dormand-Prince integration reporting the state at every
    grid point in ``t``. Steps are clipped to land on the grid exactly."""
    t = [float(v) for v in t]
    xs = [x0]
    x = x0
    k1 = f(x)
    if h0 is None:
        d0 = float(x.abs().max()) + 1e-12
        d1 = float(k1.abs().max()) + 1e-12
        h0 = 0.01 * d0 / d1
        if len(t) > 1:
            h0 = min(h0, t[-1] - t[0])
    h = h0
    steps = 0
    for target in t[1:]:
        tc = t[len(xs) - 1]
        while tc < target:
            hs = min(h, target - tc)
            last = hs == target - tc
            x_new, err, k7 = dopri5_step(f, x, hs, k1)
            steps += 1
            if steps > max_steps:
                raise IntegrationError("maximum number of steps exceeded")
            if not torch.all(torch.isfinite(x_new)):
                en = math.inf
            else:
                en = _err_norm(err, x, x_new, rtol, atol)
            fac = 10.0 if en == 0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
            if en <= 1.0:
                x, k1 = x_new, k7
                tc = target if last else tc + hs
                # a step shortened to hit the grid says nothing about h
                h = max(h, hs * fac) if last else hs * fac
            else:
                h = hs * min(fac, 0.9)
                if h < 1e-14 * max(1.0, abs(tc)):
                    raise IntegrationError("step size underflow")
        xs.append(x)
    return xs


def integrate(f: Flow, x0: torch.Tensor, t, method: str = "rk4", substeps: int = 1,
              rtol: float = 1e-8, atol: float = 1e-8) -> list[torch.Tensor]:
    if method == "rk4":
        return odeint_rk4(f, x0, t, substeps)
    if method == "dopri5":
        return odeint_dopri5(f, x0, t, rtol, atol)
    raise ValueError(f"unknown method {method!r}")


def rollout(model, q0, zeta0, u, t, method: str = "dopri5", substeps: int = 1,
            rtol: float = 1e-8, atol: float = 1e-8):
    """Integrate a model from ``(q0, zeta0)`` with inputs held at ``u``.

    Returns ``(q, zeta, x)`` stacked along a leading time axis.
    """
    q0, zeta0, u = (torch.as_tensor(np.asarray(a, dtype=float)) for a in (q0, zeta0, u))
    with torch.no_grad():
        x0 = model.encode(q0, zeta0).detach()
        xs = integrate(lambda x: model.flow(x, u), x0, t, method, substeps, rtol, atol)
        X = torch.stack(xs)
        qs, zs = [], []
        for x in xs:
            q, z = model.decode(x)
            qs.append(q)
            zs.append(z)
    return torch.stack(qs), torch.stack(zs), X


# ------------------------------------------------------------ gradients

def loss_gradient(model, batch: dict, loss_fn, mode: str = "backprop", substeps: int = 1):
    """Loss and parameter gradients of a multi-step prediction loss.

    ``batch`` holds ``q0``, ``zeta0``, ``u`` and the time grid ``t``;
    ``loss_fn(preds, batch)`` takes the list of decoded predictions at
    ``t[1:]``. ``mode`` is ``"backprop"`` (through the RK4 steps) or
    ``"adjoint"`` (augmented backward integration with resets at the
    sample times).
    """
    params = [p for p in model.parameters() if p.requires_grad]
    t = [float(v) for v in batch["t"]]
    u = batch["u"]

    def fl(x):
        return model.flow(x, u)

    if mode == "backprop":
        with torch.enable_grad():
            x0 = model.encode(batch["q0"], batch["zeta0"])
            xs = odeint_rk4(fl, x0, t, substeps)
            loss = loss_fn([model.decode(x) for x in xs[1:]], batch)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
        return loss.detach(), [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    if mode != "adjoint":
        raise ValueError(f"unknown gradient mode {mode!r}")

    with torch.no_grad():
        x0 = model.encode(batch["q0"], batch["zeta0"])
        xs = odeint_rk4(fl, x0, t, substeps)
    with torch.enable_grad():
        leaves = [x.detach().requires_grad_(True) for x in xs[1:]]
        loss = loss_fn([model.decode(x) for x in leaves], batch)
        out = torch.autograd.grad(loss, leaves + params, allow_unused=True)
    dL_dx = [g if g is not None else torch.zeros_like(x) for g, x in zip(out[:len(leaves)], leaves)]
    gtheta = [torch.zeros_like(p) if g is None else g.detach() for g, p in zip(out[len(leaves):], params)]

    def aug(state):
        x, a = state[0], state[1]
        with torch.enable_grad():
            xl = x.detach().requires_grad_(True)
            fx = fl(xl)
            vj = torch.autograd.grad(fx, [xl] + params, grad_outputs=a, allow_unused=True)
        da = -vj[0] if vj[0] is not None else torch.zeros_like(a)
        dg = [torch.zeros_like(p) if g is None else -g for g, p in zip(vj[1:], params)]
        return [fx.detach(), da] + dg

    def axpy(s, h, k):
        return [si + h * ki for si, ki in zip(s, k)]

    a = dL_dx[-1]
    for n in range(len(t) - 1, 0, -1):
        h = -(t[n] - t[n - 1]) / substeps
        state = [xs[n].detach(), a] + [torch.zeros_like(p) for p in params]
        for _ in range(substeps):
            k1 = aug(state)
            k2 = aug(axpy(state, 0.5 * h, k1))
            k3 = aug(axpy(state, 0.5 * h, k2))
            k4 = aug(axpy(state, h, k3))
            state = [s + (h / 6) * (a1 + 2 * a2 + 2 * a3 + a4)
                     for s, a1, a2, a3, a4 in zip(state, k1, k2, k3, k4)]
        a = state[1]
        gtheta = [g + s for g, s in zip(gtheta, state[2:])]
        if n - 1 >= 1:
            a = a + dL_dx[n - 2]
    with torch.enable_grad():
        x0 = model.encode(batch["q0"], batch["zeta0"])
        if x0.requires_grad:
            g0 = torch.autograd.grad(x0, params, grad_outputs=a, allow_unused=True)
            gtheta = [g + (0 if gi is None else gi) for g, gi in zip(gtheta, g0)]
    return loss.detach(), gtheta


# ------------------------------------------------------------ metrics

def constraint_errors(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``|det R - 1|`` and ``||R^T R - I||_F`` for a stack of rotations."""
    R = np.asarray(R, dtype=float)
    n = R.shape[-1]
    det = np.abs(np.linalg.det(R) - 1.0)
    orth = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(n), axis=(-2, -1))
    return det, orth


def constraint_metrics(R: np.ndarray) -> dict:
    det, orth = constraint_errors(R)
    return {"det_err": float(det.mean()), "orth_err": float(orth.mean()),
            "det_err_max": float(det.max()), "orth_err_max": float(orth.max())}


def embed_se3(q: np.ndarray, zeta: np.ndarray, group: str):
    """Lift flat states of any supported group to SE(3) coordinates.

    Returns position (.., 3), rotation (.., 3, 3), v (.., 3), w (.., 3).
    """
    q, zeta = np.asarray(q, dtype=float), np.asarray(zeta, dtype=float)
    lead = q.shape[:-1]
    pos = np.zeros(lead + (3,))
    R = np.zeros(lead + (3, 3))
    v = np.zeros(lead + (3,))
    w = np.zeros(lead + (3,))
    if group == "SO3":
        R[:] = q.reshape(lead + (3, 3))
        w[:] = zeta
    elif group == "SE3":
        pos[:] = q[..., :3]
        R[:] = q[..., 3:].reshape(lead + (3, 3))
        v[:] = zeta[..., :3]
        w[:] = zeta[..., 3:]
    elif group == "SE2":
        pos[..., :2] = q[..., :2]
        R[..., :2, :2] = q[..., 2:].reshape(lead + (2, 2))
        R[..., 2, 2] = 1.0
        v[..., :2] = zeta[..., :2]
        w[..., 2] = zeta[..., 2]
    else:
        raise ValueError(group)
    return pos, R, v, w


ROLLOUT_HEADER = (["t", "px", "py", "pz"] + [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]
                  + ["vx", "vy", "vz", "wx", "wy", "wz", "H", "det_err", "orth_err"])


def write_rollout_csv(path, t, q, zeta, H, group: str) -> None:
    """One row per time step for a single trajectory."""
    pos, R, v, w = embed_se3(q, zeta, group)
    rot_native = np.asarray(q)[..., -9:].reshape(-1, 3, 3) if group != "SE2" else \
        np.asarray(q)[..., 2:].reshape(-1, 2, 2)
    det, orth = constraint_errors(rot_native)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ROLLOUT_HEADER)
        for k in range(len(t)):
            row = [t[k], *pos[k], *R[k].reshape(-1), *v[k], *w[k], H[k], det[k], orth[k]]
            wr.writerow([repr(float(x)) for x in row])


def mean_and_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std())

