import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lieham import nets
from lieham.nets import CholeskyFactorNet, Mlp, pack_tril, unpack_tril


def central_jacobian(f, x, h=1e-5):
    cols = []
    for i in range(x.shape[1]):
        e = torch.zeros_like(x)
        e[:, i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return torch.stack(cols, -1)


@pytest.mark.parametrize("dims", [[3, 1], [4, 8, 2], [9, 16, 16, 6], [12, 5, 5, 5, 24]])
def test_mlp_jacobian_matches_finite_differences(dims):
    net = Mlp(dims, nets.seeded_generator(1))
    x = torch.randn(7, dims[0], dtype=torch.float64, generator=nets.seeded_generator(2))
    with torch.no_grad():
        J, Jfd = net.jacobian(x), central_jacobian(net, x)
    assert J.shape == (7, dims[-1], dims[0])
    assert torch.linalg.norm(J - Jfd) / torch.linalg.norm(Jfd) < 1e-5


def test_parameter_vjp_matches_perturbation():
    net = Mlp([5, 6, 3], nets.seeded_generator(3))
    x = torch.randn(4, 5, dtype=torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    _, _, vjp = nets.mlp_eval_with_derivatives(net, x)
    g = torch.cat([v.reshape(-1) for v in vjp(w)])
    theta = nets.flat_params(net)
    fd = torch.zeros_like(theta)
    h = 1e-6
    with torch.no_grad():
        for i in range(len(theta)):
            for s in (1, -1):
                t = theta.clone()
                t[i] += s * h
                nets.set_flat_params(net, t)
                fd[i] += s * (w * net(x)).sum() / (2 * h)
    nets.set_flat_params(net, theta)
    assert torch.linalg.norm(g - fd) / torch.linalg.norm(fd) < 1e-4


def test_init_is_uniform_fan_in_with_zero_bias_and_seeded():
    a, b = Mlp([50, 40, 3], nets.seeded_generator(7)), Mlp([50, 40, 3], nets.seeded_generator(7))
    for la, lb in zip(a.layers, b.layers):
        assert torch.equal(la.weight, lb.weight)
        assert torch.all(la.bias == 0)
        assert la.weight.abs().max() <= 1 / math.sqrt(la.in_features)
    assert not torch.equal(a.layers[0].weight, Mlp([50, 40, 3], nets.seeded_generator(8)).layers[0].weight)


def test_mlp_rejects_bad_dims():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 0, 1])


@pytest.mark.parametrize("k", [1, 2, 3, 6])
def test_tril_roundtrip(k):
    flat = torch.arange(float(nets.tril_size(k)), dtype=torch.float64).expand(2, -1)
    L = unpack_tril(flat, k)
    assert torch.equal(L, torch.tril(L))
    assert torch.equal(pack_tril(L), flat)


def test_tril_row_major_layout():
    L = unpack_tril(torch.tensor([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 3)
    assert torch.equal(L, torch.tensor([[1.0, 0, 0], [2, 3, 0], [4, 5, 6]]))
    with pytest.raises(ValueError):
        unpack_tril(torch.zeros(5), 3)


def test_cholesky_head_is_spd_with_floor():
    head = CholeskyFactorNet(Mlp([9, 16, 6], nets.seeded_generator(0)), 3, eps=0.01)
    x = torch.randn(50, 9, dtype=torch.float64)
    with torch.no_grad():
        M = head(x)
    assert torch.allclose(M, M.transpose(1, 2))
    assert torch.linalg.eigvalsh(M).min() >= 0.01 - 1e-12
    with pytest.raises(ValueError):
        CholeskyFactorNet(Mlp([9, 4], None), 3)


def test_cholesky_nominal_offset():
    L0 = torch.diag(torch.tensor([2.0, 3.0], dtype=torch.float64))
    net = Mlp([2, 3], nets.seeded_generator(0))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    head = CholeskyFactorNet(net, 2, eps=0.0, L0=L0)
    with torch.no_grad():
        assert torch.allclose(head(torch.zeros(1, 2, dtype=torch.float64))[0], L0 @ L0.T)


@pytest.mark.parametrize("name", sorted(nets.PRESETS))
def test_presets_are_consistent(name):
    p = nets.preset_layers(name)
    h = p["heads"]
    r = {"SO3": 3, "SE2": 1, "SE3": 3}[p["group"]]
    assert h["mass_w"][-1] == nets.tril_size(r)
    d = {"SO3": 3, "SE2": 3, "SE3": 6}[p["group"]]
    assert h["input"][-1] == d * p["m"]
    assert h["potential"][-1] == 1
    # presets are copies
    h["mass_w"][0] = -1
    assert nets.preset_layers(name)["heads"]["mass_w"][0] != -1


def test_reference_sizes():
    assert nets.preset_layers("pendulum")["heads"]["mass_w"] == [9, 300, 300, 300, 6]
    assert nets.preset_layers("quadrotor")["heads"]["input"] == [12, 400, 400, 24]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4))
def test_property_cholesky_symmetric_psd(k, batch):
    head = CholeskyFactorNet(Mlp([4, 5, nets.tril_size(k)], nets.seeded_generator(k)), k, eps=0.0)
    x = torch.as_tensor(np.random.default_rng(batch).normal(size=(batch, 4)))
    with torch.no_grad():
        M = head(x)
    assert torch.allclose(M, M.transpose(1, 2))
    assert torch.linalg.eigvalsh(M).min() > -1e-12
