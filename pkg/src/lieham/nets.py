"""Small tanh MLPs and the network heads used by the learned models."""

from __future__ import annotations

import math

import torch
from torch import nn

DTYPE = torch.float64
MASS_EPS = 0.01


class Mlp(nn.Module):
    """Fully connected net with tanh hidden layers and a linear output."""

    def __init__(self, layer_dims: list[int], generator: torch.Generator | None = None):
        super().__init__()
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"bad layer_dims {layer_dims}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(layer_dims[:-1], layer_dims[1:])
        )
        with torch.no_grad():
            for lin in self.layers:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.zero_()

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.tanh(lin(x))
        return self.layers[-1](x)

    def jacobian(self, x: torch.Tensor) -> torch.Tensor:
        """Input Jacobian by the chain rule, shape ``(batch, out, in)``."""
        J = None
        h = x
        for lin in self.layers[:-1]:
            h = torch.tanh(lin(h))
            Jl = (1 - h * h).unsqueeze(-1) * lin.weight
            J = Jl if J is None else Jl @ J
        W = self.layers[-1].weight
        return W.expand(x.shape[0], *W.shape) if J is None else W @ J


def mlp_eval_with_derivatives(net: Mlp, x: torch.Tensor):
    """Evaluate ``net`` at ``x`` and return ``(y, dy_dx, vjp)``.

    ``vjp(w)`` gives the parameter gradients of ``sum(w * y)`` as a list
    aligned with ``net.parameters()``.
    """
    params = list(net.parameters())
    with torch.enable_grad():
        y = net(x)
    dy_dx = net.jacobian(x)

    def vjp(w: torch.Tensor) -> list[torch.Tensor]:
        grads = torch.autograd.grad(y, params, grad_outputs=w, retain_graph=True, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]

    return y.detach(), dy_dx.detach(), vjp


def tril_size(k: int) -> int:
    return k * (k + 1) // 2


def unpack_tril(flat: torch.Tensor, k: int) -> torch.Tensor:
    """Row-major packed lower triangle ``(..., k(k+1)/2)`` to ``(..., k, k)``."""
    if flat.shape[-1] != tril_size(k):
        raise ValueError(f"expected {tril_size(k)} packed entries, got {flat.shape[-1]}")
    idx = torch.tril_indices(k, k)
    out = flat.new_zeros(*flat.shape[:-1], k, k)
    out[..., idx[0], idx[1]] = flat
    return out


def pack_tril(L: torch.Tensor) -> torch.Tensor:
    k = L.shape[-1]
    idx = torch.tril_indices(k, k)
    return L[..., idx[0], idx[1]]


class CholeskyFactorNet(nn.Module):
    """``(L0 + L(x)) (L0 + L(x))^T + eps I`` with ``L`` from an MLP."""

    def __init__(self, net: Mlp, k: int, eps: float = MASS_EPS, L0: torch.Tensor | None = None):
        super().__init__()
        if net.out_dim != tril_size(k):
            raise ValueError(f"net must output {tril_size(k)} values for a {k}x{k} factor")
        self.net, self.k, self.eps = net, k, float(eps)
        self.register_buffer("L0", torch.zeros(k, k, dtype=DTYPE) if L0 is None else torch.as_tensor(L0, dtype=DTYPE))

    def factor(self, x: torch.Tensor) -> torch.Tensor:
        return self.L0 + unpack_tril(self.net(x), self.k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L = self.factor(x)
        eye = torch.eye(self.k, dtype=x.dtype)
        return L @ L.transpose(-1, -2) + self.eps * eye


# Architecture presets. Each entry lists the layer dims of every head
# (input and output widths included); ``None`` means the head is absent.
def _stack(i: int, width: int, depth: int, o: int) -> list[int]:
    return [i] + [width] * depth + [o]


def preset_layers(name: str) -> dict:
    """Return ``{"group", "m", "heads": {...}}`` for a named architecture."""
    p = dict(PRESETS[name])
    p["heads"] = {k: (None if v is None else list(v)) for k, v in p["heads"].items()}
    return p


PRESETS: dict[str, dict] = {
    # large reference sizes
    "pendulum": {
        "group": "SO3", "m": 1,
        "heads": {
            "mass_w": _stack(9, 300, 3, 6), "mass_v": None,
            "potential": _stack(9, 50, 2, 1), "input": _stack(9, 300, 2, 3),
            "diss_w": None, "diss_v": None,
        },
    },
    "quadrotor": {
        "group": "SE3", "m": 4,
        "heads": {
            "mass_v": _stack(3, 400, 3, 6), "mass_w": _stack(9, 400, 3, 6),
            "potential": _stack(12, 400, 2, 1), "input": _stack(12, 400, 2, 24),
            "diss_v": None, "diss_w": None,
        },
    },
    "px4": {
        "group": "SE3", "m": 4,
        "heads": {
            "mass_v": _stack(3, 20, 3, 6), "mass_w": _stack(9, 20, 3, 6),
            "potential": _stack(12, 20, 2, 1), "input": _stack(12, 20, 2, 24),
            "diss_v": _stack(3, 20, 3, 6), "diss_w": _stack(9, 20, 3, 6),
        },
    },
    # desk-scale sizes used by the acceptance runs on a single CPU core
    "pendulum_desk": {
        "group": "SO3", "m": 1,
        "heads": {
            "mass_w": _stack(9, 32, 2, 6), "mass_v": None,
            "potential": _stack(9, 32, 2, 1), "input": _stack(9, 32, 2, 3),
            "diss_w": None, "diss_v": None,
        },
    },
    "se2_desk": {
        "group": "SE2", "m": 3,
        "heads": {
            "mass_v": _stack(2, 32, 2, 3), "mass_w": _stack(4, 32, 2, 1),
            "potential": _stack(6, 32, 2, 1), "input": _stack(6, 32, 2, 9),
            "diss_v": None, "diss_w": None,
        },
    },
    "quadrotor_desk": {
        "group": "SE3", "m": 4,
        "heads": {
            "mass_v": _stack(3, 32, 2, 6), "mass_w": _stack(9, 32, 2, 6),
            "potential": _stack(12, 32, 2, 1), "input": _stack(12, 32, 2, 24),
            "diss_v": None, "diss_w": None,
        },
    },
}


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def flat_params(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def set_flat_params(module: nn.Module, flat: torch.Tensor) -> None:
    i = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[i:i + n].view_as(p))
            i += n

