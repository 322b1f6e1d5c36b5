"""Port-Hamiltonian dynamics on SO(3), SE(2) and SE(3).

States are flat, batched tensors ``x = [q, p]`` where ``q`` stacks the
position (if any) and the rows of the rotation matrix, and ``p`` is the
generalized momentum in the body frame. ``zeta = dH/dp`` is the body twist.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from . import liegroup as lg
from .nets import DTYPE, MASS_EPS, CholeskyFactorNet, Mlp, seeded_generator, tril_size

NQ = {"SO3": 9, "SE2": 6, "SE3": 12}
DIM = {"SO3": 3, "SE2": 3, "SE3": 6}
POS_DIM = {"SO3": 0, "SE2": 2, "SE3": 3}
ROT_DIM = {"SO3": 3, "SE2": 2, "SE3": 3}


def _check(group: str) -> None:
    if group not in NQ:
        raise ValueError(f"dynamics support SO3, SE2 and SE3, not {group!r}")


# ------------------------------------------------------------ coordinates

def split_q(q: torch.Tensor, group: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched ``q`` to ``(position (B, k), R (B, n, n))``."""
    k, n = POS_DIM[group], ROT_DIM[group]
    return q[:, :k], q[:, k:].reshape(-1, n, n)


def q_from_matrix(g: np.ndarray, group: str) -> np.ndarray:
    """Homogeneous matrix (or rotation for SO3) to the flat ``q`` vector."""
    _check(group)
    g = np.asarray(g, dtype=float)
    if group == "SO3":
        return g.reshape(9)
    R = lg.rotation_part(g, group)
    return np.concatenate([lg.translation_part(g, group), R.reshape(-1)])


def matrix_from_q(q: np.ndarray, group: str) -> np.ndarray:
    _check(group)
    q = np.asarray(q, dtype=float)
    k, n = POS_DIM[group], ROT_DIM[group]
    R = q[k:].reshape(n, n)
    if group == "SO3":
        return R
    return lg.from_parts(R, q[:k], group)


def _cross(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.linalg.cross(a, b, dim=-1)


def lie_flow(group: str, q: torch.Tensor, p: torch.Tensor, zeta: torch.Tensor,
             dHdq: torch.Tensor, force: torch.Tensor | None = None) -> torch.Tensor:
    """Right-hand side ``[q_dot, p_dot]`` of the Hamiltonian flow.

    ``force`` collects the non-conservative body-frame terms (input minus
    dissipation) added to ``p_dot``.
    """
    B = q.shape[0]
    if group == "SO3":
        R = q.reshape(B, 3, 3)
        w = zeta
        dR = _cross(R, w.unsqueeze(1).expand_as(R))
        torque = _cross(R, dHdq.reshape(B, 3, 3)).sum(1)
        dp = _cross(p, w) + torque
        dq = dR.reshape(B, 9)
    elif group == "SE3":
        pos_grad, gR = dHdq[:, :3], dHdq[:, 3:].reshape(B, 3, 3)
        R = q[:, 3:].reshape(B, 3, 3)
        v, w = zeta[:, :3], zeta[:, 3:]
        pv, pw = p[:, :3], p[:, 3:]
        dpos = (R @ v.unsqueeze(-1)).squeeze(-1)
        dR = _cross(R, w.unsqueeze(1).expand_as(R))
        dpv = _cross(pv, w) - (R.transpose(1, 2) @ pos_grad.unsqueeze(-1)).squeeze(-1)
        dpw = _cross(pw, w) + _cross(pv, v) + _cross(R, gR).sum(1)
        dq = torch.cat([dpos, dR.reshape(B, 9)], 1)
        dp = torch.cat([dpv, dpw], 1)
    elif group == "SE2":
        pos_grad, gR = dHdq[:, :2], dHdq[:, 2:].reshape(B, 2, 2)
        R = q[:, 2:].reshape(B, 2, 2)
        v, w = zeta[:, :2], zeta[:, 2:3]
        pv = p[:, :2]
        dpos = (R @ v.unsqueeze(-1)).squeeze(-1)
        dR = torch.stack([R[:, :, 1] * w, -R[:, :, 0] * w], -1)
        dpv = torch.cat([pv[:, 1:2] * w, -pv[:, 0:1] * w], 1) - (
            R.transpose(1, 2) @ pos_grad.unsqueeze(-1)).squeeze(-1)
        torque = (R[:, :, 0] * gR[:, :, 1] - R[:, :, 1] * gR[:, :, 0]).sum(1, keepdim=True)
        dpw = pv[:, 0:1] * v[:, 1:2] - pv[:, 1:2] * v[:, 0:1] + torque
        dq = torch.cat([dpos, dR.reshape(B, 4)], 1)
        dp = torch.cat([dpv, dpw], 1)
    else:
        raise ValueError(group)
    if force is not None:
        dp = dp + force
    return torch.cat([dq, dp], 1)


def generic_flow(g: np.ndarray, p: np.ndarray, eta: np.ndarray, zeta: np.ndarray,
                 group: str, force: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Same flow written with the matrix-group operations of :mod:`liegroup`.

    ``eta`` is ``dH/dq`` laid out like the group matrix. Used as an
    independent reference for :func:`lie_flow`.
    """
    xi = lg.hat(zeta, group)
    P = lg.momentum_to_matrix(p, group)
    dP = lg.coad_star_matrix(xi, P, group) - lg.dual_left_translate(g, eta, group)
    dp = lg.matrix_to_momentum(dP, group)
    if force is not None:
        dp = dp + force
    return g @ xi, dp


def eta_from_qgrad(dHdq: np.ndarray, group: str) -> np.ndarray:
    """Lay out a gradient w.r.t. the flat ``q`` like the group matrix."""
    n = lg.MATRIX_SIZE[group]
    k, r = POS_DIM[group], ROT_DIM[group]
    eta = np.zeros((n, n))
    eta[:r, :r] = dHdq[k:].reshape(r, r)
    if k:
        eta[:k, -1] = dHdq[:k]
    return eta


# ------------------------------------------------------------ components

class ConstantMatrix(nn.Module):
    def __init__(self, M):
        super().__init__()
        self.register_buffer("M", torch.as_tensor(np.asarray(M, dtype=float), dtype=DTYPE))

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        return self.M.expand(q.shape[0], *self.M.shape)


class BlockMatrix(nn.Module):
    """Block-diagonal SPD head: translational block from the position,
    rotational block from the rotation entries."""

    def __init__(self, group: str, rot: nn.Module, trans: nn.Module | None = None):
        super().__init__()
        self.group, self.rot, self.trans = group, rot, trans

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        k = POS_DIM[self.group]
        Mr = self.rot(q[:, k:])
        if self.trans is None:
            return Mr
        Mt = self.trans(q[:, :k])
        B, a, b = q.shape[0], Mt.shape[-1], Mr.shape[-1]
        out = q.new_zeros(B, a + b, a + b)
        out[:, :a, :a] = Mt
        out[:, a:, a:] = Mr
        return out


def nominal_potential(q: torch.Tensor, spec: dict | None, group: str) -> torch.Tensor:
    """Closed-form potentials: ``zero``, ``height`` (coeff * z) and
    ``cosine`` (coeff * (1 - R[0, 0]))."""
    kind = (spec or {}).get("kind", "zero")
    c = float((spec or {}).get("coeff", 0.0))
    if kind == "zero":
        return q.new_zeros(q.shape[0])
    if kind == "height":
        if group != "SE3":
            raise ValueError("height potential needs SE3")
        return c * q[:, 2]
    if kind == "cosine":
        return c * (1.0 - q[:, POS_DIM[group]])
    raise ValueError(f"unknown nominal potential {kind!r}")


class Potential(nn.Module):
    def __init__(self, group: str, net: Mlp | None = None, nominal: dict | None = None):
        super().__init__()
        self.group, self.net, self.nominal = group, net, dict(nominal or {"kind": "zero"})

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        V = nominal_potential(q, self.nominal, self.group)
        if self.net is not None:
            V = V + self.net(q).squeeze(-1)
        return V


class InputMatrix(nn.Module):
    def __init__(self, d: int, m: int, net: Mlp | None = None, B0=None):
        super().__init__()
        self.d, self.m, self.net = d, m, net
        B0 = np.zeros((d, m)) if B0 is None else np.asarray(B0, dtype=float)
        self.register_buffer("B0", torch.as_tensor(B0, dtype=DTYPE))

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        out = self.B0.expand(q.shape[0], self.d, self.m)
        if self.net is not None:
            out = out + self.net(q).reshape(-1, self.d, self.m)
        return out


class Scaled(nn.Module):
    def __init__(self, inner: nn.Module, factor: float):
        super().__init__()
        self.inner, self.factor = inner, float(factor)

    def forward(self, q):
        return self.factor * self.inner(q)


class DiagScaled(nn.Module):
    """``diag(left) A(q) diag(right)`` for a matrix-valued head ``A``."""

    def __init__(self, inner: nn.Module, left, right=None):
        super().__init__()
        self.inner = inner
        self.register_buffer("left", torch.as_tensor(np.asarray(left, dtype=float)))
        self.register_buffer("right", None if right is None else torch.as_tensor(np.asarray(right, dtype=float)))

    def forward(self, q):
        out = self.left[:, None] * self.inner(q)
        return out if self.right is None else out * self.right

# ------------------------------------------------------------ models

def _prepare(x: torch.Tensor, nq: int, need_p: bool = False):
    graph = torch.is_grad_enabled()
    q, p = x[:, :nq], x[:, nq:]
    if not graph:
        q, p = q.detach(), p.detach()
    if not q.requires_grad:
        q = q.detach().requires_grad_(True)
    if need_p and not p.requires_grad:
        p = p.detach().requires_grad_(True)
    return q, p, graph


def _grad(out: torch.Tensor, inputs, graph: bool):
    if not out.requires_grad:
        return [torch.zeros_like(i) for i in inputs]
    grads = torch.autograd.grad(out.sum(), inputs, create_graph=graph, allow_unused=True)
    return [torch.zeros_like(i) if g is None else g for g, i in zip(grads, inputs)]


class PortHamiltonianModel(nn.Module):
    """``H(q, p) = p^T M^-1(q) p / 2 + V(q)`` with input matrix ``B(q)`` and
    optional dissipation ``D(q)``."""

    arch = "structured"

    def __init__(self, group: str, m: int, mass_inverse: nn.Module, potential: nn.Module,
                 input_matrix: nn.Module, dissipation: nn.Module | None = None, spec: dict | None = None):
        super().__init__()
        _check(group)
        self.group, self.m = group, int(m)
        self.nq, self.d = NQ[group], DIM[group]
        self.mass_inverse = mass_inverse
        self.potential = potential
        self.input_matrix = input_matrix
        self.dissipation = dissipation
        self.spec = spec

    # heads
    def kinetic(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        Minv = self.mass_inverse(q)
        return 0.5 * (p.unsqueeze(1) @ Minv @ p.unsqueeze(-1)).reshape(-1)

    def hamiltonian(self, x: torch.Tensor) -> torch.Tensor:
        q, p = x[:, :self.nq], x[:, self.nq:]
        return self.kinetic(q, p) + self.potential(q)

    def hamiltonian_gradients(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, p, graph = _prepare(x, self.nq)
        with torch.enable_grad():
            Minv = self.mass_inverse(q)
            zeta = (Minv @ p.unsqueeze(-1)).squeeze(-1)
            H = 0.5 * (p * zeta).sum(1) + self.potential(q)
            (dHdq,) = _grad(H, [q], graph)
        if not graph:
            return dHdq.detach(), zeta.detach()
        return dHdq, zeta

    # protocol used by the integrators and training loop
    def encode(self, q: torch.Tensor, zeta: torch.Tensor) -> torch.Tensor:
        p = torch.linalg.solve(self.mass_inverse(q), zeta.unsqueeze(-1)).squeeze(-1)
        return torch.cat([q, p], 1)

    def decode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, p = x[:, :self.nq], x[:, self.nq:]
        return q, (self.mass_inverse(q) @ p.unsqueeze(-1)).squeeze(-1)

    def flow(self, x: torch.Tensor, u: torch.Tensor | None = None) -> torch.Tensor:
        q, p, graph = _prepare(x, self.nq)
        with torch.enable_grad():
            Minv = self.mass_inverse(q)
            zeta = (Minv @ p.unsqueeze(-1)).squeeze(-1)
            H = 0.5 * (p * zeta).sum(1) + self.potential(q)
            (dHdq,) = _grad(H, [q], graph)
            force = self._force(q, zeta, u)
            out = lie_flow(self.group, q, p, zeta, dHdq, force)
        return out if graph else out.detach()

    def _force(self, q, zeta, u):
        force = None
        if u is not None and self.m:
            force = (self.input_matrix(q) @ u.unsqueeze(-1)).squeeze(-1)
        if self.dissipation is not None:
            Dz = -(self.dissipation(q) @ zeta.unsqueeze(-1)).squeeze(-1)
            force = Dz if force is None else force + Dz
        return force

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        return self.hamiltonian(x)

    def scaled(self, beta: float) -> "PortHamiltonianModel":
        """Equivalent model with ``M -> beta M``, ``V -> beta V``,
        ``D -> beta D`` and ``B -> beta B``."""
        return PortHamiltonianModel(
            self.group, self.m,
            Scaled(copy.deepcopy(self.mass_inverse), 1.0 / beta),
            Scaled(copy.deepcopy(self.potential), beta),
            Scaled(copy.deepcopy(self.input_matrix), beta),
            None if self.dissipation is None else Scaled(copy.deepcopy(self.dissipation), beta),
        )

    def block_scaled(self, beta_v: float, beta_w: float) -> "PortHamiltonianModel":
        """Separate gauges for the translational and rotational blocks.

        Trajectories are unchanged when ``M_v`` is isotropic and ``V``
        depends on position only (or, without translation, when
        ``beta_w`` also scales ``V``).
        """
        k = POS_DIM[self.group]
        b = np.array([beta_v] * k + [beta_w] * (self.d - k), dtype=float)
        rb = np.sqrt(b)
        diss = self.dissipation
        return PortHamiltonianModel(
            self.group, self.m,
            DiagScaled(copy.deepcopy(self.mass_inverse), 1 / rb, 1 / rb),
            Scaled(copy.deepcopy(self.potential), beta_v if k else beta_w),
            DiagScaled(copy.deepcopy(self.input_matrix), b),
            None if diss is None else DiagScaled(copy.deepcopy(diss), rb, rb),
        )

    def without_dissipation(self) -> "PortHamiltonianModel":
        return PortHamiltonianModel(self.group, self.m, self.mass_inverse, self.potential,
                                    self.input_matrix, None, self.spec)


class UnstructuredModel(nn.Module):
    """Baseline whose Hamiltonian is one MLP over ``(q, p)``.

    The flow equations are the same as for the structured model. A mass
    head is kept only to turn measured twists into initial momenta.
    """

    arch = "unstructured"

    def __init__(self, group: str, m: int, hnet: Mlp, mass_inverse: nn.Module,
                 input_matrix: nn.Module, dissipation: nn.Module | None = None, spec: dict | None = None):
        super().__init__()
        _check(group)
        self.group, self.m = group, int(m)
        self.nq, self.d = NQ[group], DIM[group]
        self.hnet, self.mass_inverse = hnet, mass_inverse
        self.input_matrix, self.dissipation = input_matrix, dissipation
        self.spec = spec

    def hamiltonian(self, x: torch.Tensor) -> torch.Tensor:
        return self.hnet(x).squeeze(-1)

    def _grads(self, x):
        q, p, graph = _prepare(x, self.nq, need_p=True)
        with torch.enable_grad():
            H = self.hnet(torch.cat([q, p], 1)).squeeze(-1)
            dHdq, dHdp = _grad(H, [q, p], graph)
        return q, p, dHdq, dHdp, graph

    def encode(self, q, zeta):
        p = torch.linalg.solve(self.mass_inverse(q), zeta.unsqueeze(-1)).squeeze(-1)
        return torch.cat([q, p], 1)

    def decode(self, x):
        _, _, _, dHdp, graph = self._grads(x)
        return x[:, :self.nq], dHdp if graph else dHdp.detach()

    def flow(self, x, u=None):
        q, p, dHdq, zeta, graph = self._grads(x)
        with torch.enable_grad():
            force = PortHamiltonianModel._force(self, q, zeta, u)
            out = lie_flow(self.group, q, p, zeta, dHdq, force)
        return out if graph else out.detach()

    def energy(self, x):
        return self.hamiltonian(x)


class BlackBoxModel(nn.Module):
    """Baseline MLP mapping ``(q, zeta, u)`` straight to ``(q_dot, zeta_dot)``."""

    arch = "blackbox"

    def __init__(self, group: str, m: int, net: Mlp, spec: dict | None = None):
        super().__init__()
        _check(group)
        self.group, self.m = group, int(m)
        self.nq, self.d = NQ[group], DIM[group]
        self.net, self.spec = net, spec

    def encode(self, q, zeta):
        return torch.cat([q, zeta], 1)

    def decode(self, x):
        return x[:, :self.nq], x[:, self.nq:]

    def flow(self, x, u=None):
        if u is None:
            u = x.new_zeros(x.shape[0], self.m)
        return self.net(torch.cat([x, u], 1))


# ------------------------------------------------------------ builders

def _cholesky(dims, k, gen, eps, L0=None):
    if dims is None:
        return None
    if dims[-1] != tril_size(k):
        raise ValueError(f"head for a {k}x{k} factor must output {tril_size(k)} values")
    return CholeskyFactorNet(Mlp(dims, gen), k, eps, L0)


def _block(group, dims_v, dims_w, gen, eps, L0_v=None, L0_w=None, required=True):
    k, r = POS_DIM[group], DIM[group] - POS_DIM[group]
    rot = _cholesky(dims_w, r, gen, eps, L0_w)
    trans = _cholesky(dims_v, k, gen, eps, L0_v) if k else None
    if rot is None:
        if required:
            raise ValueError("rotational mass head is required")
        return None
    if k and trans is None:
        raise ValueError("translational head is required for " + group)
    return BlockMatrix(group, rot, trans)


def build_model(spec: dict) -> nn.Module:
    """Instantiate a model from a JSON-able spec (also stored in checkpoints).

    Keys: ``arch``, ``group``, ``m``, ``heads`` (layer dims per head),
    ``seed``, optional ``nominal`` with ``potential``, ``B0``, ``L0_v``,
    ``L0_w`` entries.
    """
    arch, group, m = spec.get("arch", "structured"), spec["group"], int(spec["m"])
    _check(group)
    heads, nominal = spec["heads"], spec.get("nominal") or {}
    gen = seeded_generator(spec.get("seed", 0))
    d, nq = DIM[group], NQ[group]
    eps = float(spec.get("eps", MASS_EPS))

    def t(name):
        v = nominal.get(name)
        return None if v is None else torch.as_tensor(np.asarray(v, dtype=float), dtype=DTYPE)

    if arch == "blackbox":
        net = Mlp(heads["blackbox"], gen)
        if net.in_dim != nq + d + m or net.out_dim != nq + d:
            raise ValueError("black-box net dims do not match the state/input sizes")
        return BlackBoxModel(group, m, net, spec=dict(spec))

    mass = _block(group, heads.get("mass_v"), heads.get("mass_w"), gen, eps, t("L0_v"), t("L0_w"))
    in_dims = heads.get("input")
    inp = InputMatrix(d, m, Mlp(in_dims, gen) if in_dims else None, nominal.get("B0"))
    diss = _block(group, heads.get("diss_v"), heads.get("diss_w"), gen, 0.0, required=False)
    if arch == "structured":
        pot_dims = heads.get("potential")
        pot = Potential(group, Mlp(pot_dims, gen) if pot_dims else None, nominal.get("potential"))
        return PortHamiltonianModel(group, m, mass, pot, inp, diss, spec=dict(spec))
    if arch == "unstructured":
        hnet = Mlp(heads["hamiltonian"], gen)
        if hnet.in_dim != nq + d:
            raise ValueError("Hamiltonian net must take q and p")
        return UnstructuredModel(group, m, hnet, mass, inp, diss, spec=dict(spec))
    raise ValueError(f"unknown arch {arch!r}")


def model_spec(preset: str | dict, arch: str = "structured", seed: int = 0, width: int | None = None,
               dissipation: bool = False, nominal: dict | None = None) -> dict:
    """Spec dict for ``build_model`` starting from a named preset."""
    from .nets import preset_layers

    base = preset_layers(preset) if isinstance(preset, str) else copy.deepcopy(preset)
    group, m = base["group"], base["m"]
    heads = dict(base["heads"])
    if not dissipation:
        heads["diss_v"] = heads["diss_w"] = None
    elif heads.get("diss_w") is None:
        heads["diss_w"] = list(heads["mass_w"])
        heads["diss_v"] = None if heads.get("mass_v") is None else list(heads["mass_v"])
    nq, d = NQ[group], DIM[group]
    w = width or max(heads["potential"][1], 16)
    if arch == "unstructured":
        heads["hamiltonian"] = [nq + d, w, w, 1]
        heads.pop("potential", None)
    elif arch == "blackbox":
        heads = {"blackbox": [nq + d + m, w, w, nq + d]}
    return {"arch": arch, "group": group, "m": m, "heads": heads, "seed": int(seed),
            "eps": MASS_EPS, "nominal": nominal or {}}
