"""Architecture comparison metrics: loss, constraint drift, energy spread and
prediction error."""

from __future__ import annotations

import numpy as np
import torch

from .dynamics import POS_DIM, ROT_DIM
from .odeint import constraint_metrics, rollout
from .training import TrajectoryDataset, evaluate_loss


def model_energy(model, q, zeta, truth=None) -> np.ndarray:
    """Hamiltonian along predicted states.

    Black-box models have no energy of their own, so ``truth`` (a structured
    model with the true mass and potential) is evaluated on their states.
    """
    q, zeta = torch.as_tensor(np.asarray(q)), torch.as_tensor(np.asarray(zeta))
    if getattr(model, "arch", None) == "blackbox":
        if truth is None:
            raise ValueError("black-box energy needs the true model")
        model = truth
    with torch.no_grad():
        return model.energy(model.encode(q, zeta)).numpy()


def _rotations(q: np.ndarray, group: str) -> np.ndarray:
    r = ROT_DIM[group]
    return np.asarray(q)[..., POS_DIM[group]:].reshape(*np.shape(q)[:-1], r, r)


def free_rollout(model, q0, zeta0, duration: float, dt: float, substeps: int = 1):
    """Unforced rollout from one state with fixed-step RK4."""
    n = int(round(duration / dt))
    t = np.arange(n + 1) * dt
    q0 = torch.as_tensor(np.atleast_2d(np.asarray(q0, dtype=float)))
    z0 = torch.as_tensor(np.atleast_2d(np.asarray(zeta0, dtype=float)))
    u = torch.zeros(1, model.m, dtype=torch.float64)
    q, z, _ = rollout(model, q0, z0, u, t, "rk4", substeps)
    return t, q[:, 0].numpy(), z[:, 0].numpy()


def nearest_rotation(A: np.ndarray) -> np.ndarray:
    """Project a stack of square matrices onto the rotation group (SVD)."""
    A = np.asarray(A, dtype=float)
    bad = ~np.all(np.isfinite(A), axis=(-2, -1))
    U, _, Vt = np.linalg.svd(np.where(bad[..., None, None], 0.0, A))
    D = np.ones(A.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    out = (U * D[..., None, :]) @ Vt
    out[bad] = np.nan
    return out


def rotation_angle_error(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotation stacks (2x2 or 3x3). ``Ra`` is first
    projected onto the group, so predictions that drifted off it are still
    compared meaningfully (non-finite ones give NaN)."""
    M = np.swapaxes(nearest_rotation(Ra), -1, -2) @ Rb
    if M.shape[-1] == 2:
        return np.abs(np.arctan2(M[..., 1, 0] - M[..., 0, 1], M[..., 0, 0] + M[..., 1, 1]))
    # atan2 keeps precision at small angles where arccos of the trace does not
    c = 0.5 * (np.trace(M, axis1=-2, axis2=-1) - 1.0)
    A = M - np.swapaxes(M, -1, -2)
    s = 0.5 * np.linalg.norm(np.stack([A[..., 2, 1], A[..., 0, 2], A[..., 1, 0]], -1), axis=-1)
    return np.arctan2(s, c)


def prediction_errors(model, truth, q0, zeta0, horizon: float, dt: float, substeps: int = 1,
                      truth_rtol: float = 1e-10) -> dict:
    """Mean angle and position error of unforced predictions against a
    tightly integrated reference over ``[0, horizon]``."""
    group = truth.group
    n = int(round(horizon / dt))
    t = np.arange(n + 1) * dt
    q0, zeta0 = torch.as_tensor(np.asarray(q0)), torch.as_tensor(np.asarray(zeta0))
    u = torch.zeros(len(q0), model.m, dtype=torch.float64)
    qp, _, _ = rollout(model, q0, zeta0, u, t, "rk4", substeps)
    qt, _, _ = rollout(truth, q0, zeta0, u, t, "dopri5", rtol=truth_rtol, atol=truth_rtol)
    qp, qt = qp.numpy(), qt.numpy()
    ang = rotation_angle_error(_rotations(qp, group), _rotations(qt, group))
    k = POS_DIM[group]
    pos = np.linalg.norm(qp[..., :k] - qt[..., :k], axis=-1) if k else np.zeros_like(ang)
    # a diverged prediction counts as the worst possible angle
    ang = np.where(np.isfinite(ang), ang, np.pi)
    pos = np.where(np.isfinite(pos), pos, np.inf)
    return {"angle": float(ang.mean()), "position": float(pos.mean())}


def architecture_metrics(model, truth, data: TrajectoryDataset, q0, zeta0, test_q, test_zeta, *,
                         duration: float = 50.0, dt: float = 0.05, horizon: float = 2.0,
                         substeps: int = 1) -> dict:
    """The five comparison metrics for one trained model.

    ``truth`` must be dissipation-free when the rollout is used to judge
    energy conservation.
    """
    group = data.group
    with torch.no_grad():
        loss = evaluate_loss(model, data, substeps)["loss"]
    t, q, z = free_rollout(model, q0, zeta0, duration, dt, substeps)
    cm = constraint_metrics(_rotations(q, group))
    H = model_energy(model, q, z, truth)
    # kinetic scale of the true motion at the start gives a unit for the spread
    with torch.no_grad():
        x0 = truth.encode(torch.as_tensor(np.atleast_2d(q0)), torch.as_tensor(np.atleast_2d(zeta0)))
        H0 = float(truth.energy(x0)[0])
    pe = prediction_errors(model, truth, test_q, test_zeta, horizon, dt, substeps)
    finite = np.isfinite(H)
    out = {
        "arch": getattr(model, "arch", "unknown"),
        "training_loss": float(loss),
        "det_err": cm["det_err"], "orth_err": cm["orth_err"],
        "det_err_max": cm["det_err_max"], "orth_err_max": cm["orth_err_max"],
        "energy_std": float(np.std(H[finite])) if finite.any() else float("nan"),
        "energy_mean": float(np.mean(H[finite])) if finite.any() else float("nan"),
        "energy_true_initial": H0,
        "prediction_error_angle": pe["angle"],
        "prediction_error_position": pe["position"],
        "rollout_finite": bool(finite.all() and np.all(np.isfinite(q))),
    }
    out["prediction_error"] = out["prediction_error_angle" if POS_DIM[group] == 0 else
                                  "prediction_error_position"]
    out["_trace"] = {"t": t, "q": q, "zeta": z, "H": H}
    return out


def kinetic_scale(model, q, zeta) -> float:
    """Mean kinetic energy ``zeta^T M zeta / 2`` of a structured model along states."""
    q, zeta = torch.as_tensor(np.asarray(q)), torch.as_tensor(np.asarray(zeta))
    with torch.no_grad():
        x = model.encode(q, zeta)
        p = x[:, model.nq:]
        return float((0.5 * (p * zeta).sum(1)).mean())


__all__ = ["architecture_metrics", "prediction_errors", "free_rollout", "model_energy",
           "rotation_angle_error", "nearest_rotation", "kinetic_scale"]
