"""Datasets, the multi-step prediction loss, training and scale fitting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import minimize_scalar

from .dynamics import DIM, NQ, POS_DIM, ROT_DIM
from .odeint import loss_gradient, odeint_rk4

ROT_TOL = 1e-6


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrajectoryDataset:
    """``D`` segments of ``N + 1`` samples with one constant input each.

    Shapes: ``t (D, N+1)``, ``q (D, N+1, nq)``, ``zeta (D, N+1, d)``,
    ``u (D, m)``.
    """

    group: str
    t: np.ndarray
    q: np.ndarray
    zeta: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.group not in NQ:
            raise ValueError(f"unsupported group {self.group!r}")
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        D, n1 = self.t.shape
        if n1 < 2:
            raise ValueError("segments need at least two samples")
        if self.q.shape != (D, n1, NQ[self.group]) or self.zeta.shape != (D, n1, DIM[self.group]):
            raise ValueError("q/zeta shapes do not match t and the group")
        if self.u.shape[0] != D:
            raise ValueError("one input vector per segment is required")
        for a in (self.t, self.q, self.zeta, self.u):
            if not np.all(np.isfinite(a)):
                raise ValueError("dataset contains non-finite values")
        if np.any(np.diff(self.t, axis=1) <= 0):
            raise ValueError("time stamps must increase strictly within a segment")
        k, r = POS_DIM[self.group], ROT_DIM[self.group]
        R = self.q[..., k:].reshape(-1, r, r)
        err = np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(r)).max()
        if err > ROT_TOL:
            raise ValueError(f"rotation entries are not orthonormal (max error {err:.2e})")

    @property
    def n_segments(self) -> int:
        return self.t.shape[0]

    @property
    def horizon(self) -> int:
        return self.t.shape[1] - 1

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def subset(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx)
        return TrajectoryDataset(self.group, self.t[idx], self.q[idx], self.zeta[idx], self.u[idx])

    def relative_grid(self) -> np.ndarray:
        rel = self.t - self.t[:, :1]
        if np.abs(rel - rel[0]).max() > 1e-9:
            raise ValueError("all segments must share the same relative time grid")
        return rel[0]

    def batch(self, idx=None) -> dict:
        d = self if idx is None else self.subset(idx)
        T = lambda a: torch.as_tensor(a)  # noqa: E731
        return {"t": d.relative_grid(), "q0": T(d.q[:, 0]), "zeta0": T(d.zeta[:, 0]), "u": T(d.u),
                "q": T(d.q[:, 1:]), "zeta": T(d.zeta[:, 1:]), "group": d.group}


# ------------------------------------------------------------ loss

def rotation_sq_error(R_hat: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    """Squared geodesic angle ``||log(R_hat R^T)||^2`` (smooth at zero)."""
    M = R_hat @ R.transpose(-1, -2)
    if M.shape[-1] == 2:
        return torch.atan2(0.5 * (M[..., 1, 0] - M[..., 0, 1]), 0.5 * (M[..., 0, 0] + M[..., 1, 1])) ** 2
    a = 0.5 * torch.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                           M[..., 1, 0] - M[..., 0, 1]], -1)
    c = 0.5 * (M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2] - 1.0)
    s2 = (a * a).sum(-1)
    small = s2 < 1e-20
    s = torch.sqrt(torch.where(small, torch.ones_like(s2), s2))
    ratio = torch.where(small, 1.0 / c, torch.atan2(s, c) / s)
    return s2 * ratio * ratio


def prediction_loss(preds, batch: dict, reduce: bool = True):
    """Mean over segments and samples of rotation, position and twist errors.

    Returns ``(total, {"loss_R", "loss_p", "loss_zeta"})``.
    """
    group = batch["group"]
    k, r = POS_DIM[group], ROT_DIM[group]
    qh = torch.stack([p[0] for p in preds], 1)
    zh = torch.stack([p[1] for p in preds], 1)
    q, z = batch["q"], batch["zeta"]
    shape = q.shape[:2]
    lR = rotation_sq_error(qh[..., k:].reshape(*shape, r, r), q[..., k:].reshape(*shape, r, r))
    lp = ((qh[..., :k] - q[..., :k]) ** 2).sum(-1)
    lz = ((zh - z) ** 2).sum(-1)
    if not reduce:
        return lR + lp + lz
    parts = {"loss_R": lR.mean(), "loss_p": lp.mean(), "loss_zeta": lz.mean()}
    return parts["loss_R"] + parts["loss_p"] + parts["loss_zeta"], parts


def evaluate_loss(model, data: TrajectoryDataset, substeps: int = 1, chunk: int = 4096) -> dict:
    """Loss components over the full dataset without gradients."""
    tot = {"loss": 0.0, "loss_R": 0.0, "loss_p": 0.0, "loss_zeta": 0.0}
    n = data.n_segments
    for s in range(0, n, chunk):
        b = data.batch(np.arange(s, min(n, s + chunk)))
        with torch.no_grad():
            x0 = model.encode(b["q0"], b["zeta0"])
            xs = odeint_rk4(lambda x: model.flow(x, b["u"]), x0, b["t"], substeps)
            loss, parts = prediction_loss([model.decode(x) for x in xs[1:]], b)
        w = len(b["u"]) / n
        tot["loss"] += w * float(loss)
        for key, v in parts.items():
            tot[key] += w * float(v)
    return tot


# ------------------------------------------------------------ training

@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    batch_size: int | None = None
    full_batch_limit: int = 2048
    minibatch: int = 256
    seed: int = 0
    grad_mode: str = "backprop"
    substeps: int = 1
    checkpoint_every: int = 0
    lr_decay: float = 1.0
    log_every: int = 0

    def effective_batch(self, n: int) -> int:
        if self.batch_size:
            return min(self.batch_size, n)
        return n if n <= self.full_batch_limit else self.minibatch


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0


def train(model, data: TrajectoryDataset, cfg: TrainConfig, out_dir: str | Path | None = None,
          callback=None) -> TrainResult:
    """Fit ``model`` to ``data`` with Adam on the multi-step loss.

    Raises :class:`TrainingDiverged` on a non-finite loss or gradient; if
    ``out_dir`` is given the last finite parameters are saved there first.
    """
    from .io import save_checkpoint

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay ** (1.0 / max(1, cfg.iterations)))
    n = data.n_segments
    bs = cfg.effective_batch(n)
    full = data.batch() if bs == n else None
    res = TrainResult()
    start = time.perf_counter()
    last_good = [p.detach().clone() for p in params]
    out = Path(out_dir) if out_dir else None
    for it in range(cfg.iterations):
        batch = full if full is not None else data.batch(rng.choice(n, bs, replace=False))
        loss, grads = loss_gradient(model, batch, _loss_with_parts(res, it), cfg.grad_mode, cfg.substeps)
        if not math.isfinite(float(loss.detach())) or not all(torch.all(torch.isfinite(g)) for g in grads):
            with torch.no_grad():
                for p, good in zip(params, last_good):
                    p.copy_(good)
            if out is not None:
                save_checkpoint(model, out / "checkpoint_last_good.npz")
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it}")
        last_good = [p.detach().clone() for p in params]
        opt.zero_grad()
        for p, g in zip(params, grads):
            p.grad = g.detach()
        opt.step()
        sched.step()
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"checkpoint_{it + 1:06d}.npz")
        if callback is not None:
            callback(it, res.history[-1])
        if cfg.log_every and it % cfg.log_every == 0:
            h = res.history[-1]
            print(f"iter {it:6d} loss {h['loss']:.3e} (R {h['loss_R']:.2e} p {h['loss_p']:.2e} "
                  f"zeta {h['loss_zeta']:.2e}) {time.perf_counter() - start:.0f}s", flush=True)
    res.final = evaluate_loss(model, data, cfg.substeps)
    res.seconds = time.perf_counter() - start
    return res


def _loss_with_parts(res: TrainResult, it: int):
    def fn(preds, batch):
        loss, parts = prediction_loss(preds, batch)
        res.history.append({"iter": it, "loss": float(loss.detach()),
                            **{k: float(v.detach()) for k, v in parts.items()}})
        return loss
    return fn


# ------------------------------------------------------------ scale fitting

@dataclass
class ScaleFit:
    beta: float
    residuals: dict


def _head_values(model, q: np.ndarray) -> dict:
    qt = torch.as_tensor(np.asarray(q, dtype=float))
    with torch.no_grad():
        return {"mass_inverse": model.mass_inverse(qt).numpy(),
                "potential": model.potential(qt).numpy(),
                "input": model.input_matrix(qt).numpy()}


def estimate_scale(learned, truth, q: np.ndarray, masks: dict | None = None) -> ScaleFit:
    """Least-squares ``beta`` such that ``learned`` matches ``truth`` scaled
    by ``M -> beta M``, ``V -> beta V``, ``B -> beta B``.

    ``masks`` optionally selects identifiable entries per quantity
    (boolean arrays broadcast against one state's matrix). Residuals are
    relative RMS errors after scaling.
    """
    masks = masks or {}
    L, T = _head_values(learned, q), _head_values(truth, q)

    def sel(name, A):
        mk = masks.get(name)
        return A.reshape(len(A), -1) if mk is None else A[:, np.asarray(mk, dtype=bool)]

    Ml, Mt = sel("mass_inverse", L["mass_inverse"]), sel("mass_inverse", T["mass_inverse"])
    Bl, Bt = sel("input", L["input"]), sel("input", T["input"])
    Vl = L["potential"] - L["potential"].mean()
    Vt = T["potential"] - T["potential"].mean()
    use_v = np.linalg.norm(Vt) > 1e-12

    def terms(beta):
        out = {"mass_inverse": np.sum((beta * Ml - Mt) ** 2) / np.sum(Mt**2),
               "input": np.sum((Bl / beta - Bt) ** 2) / np.sum(Bt**2)}
        if use_v:
            out["potential"] = np.sum((Vl / beta - Vt) ** 2) / np.sum(Vt**2)
        return out

    def obj(lb):
        return sum(terms(math.exp(lb)).values())

    grid = np.linspace(-15, 15, 601)
    g0 = grid[int(np.argmin([obj(v) for v in grid]))]
    r = minimize_scalar(obj, bounds=(g0 - 0.05, g0 + 0.05), method="bounded", options={"xatol": 1e-12})
    beta = math.exp(r.x)
    return ScaleFit(beta, {k: math.sqrt(v) for k, v in terms(beta).items()})
