"""Acceptance suite. Each test records its sub-checks through the
``criterion`` fixture; a PASS/FAIL line per criterion is printed in the
terminal summary. Training fixtures are module scoped and take roughly
twenty minutes on one CPU thread."""

import time

import numpy as np
import pytest
import torch
from scipy.linalg import expm

from lieham import liegroup as lg
from lieham import odeint as ode
from lieham import nets
from lieham.control import (DEFAULT_GAINS, DesiredState, Gains, TrackingController, idapbc_generic, idapbc_se3, lift, quad_reference,
                            simulate_closed_loop, to_gauge, tracking_errors)
from lieham.dynamics import build_model, model_spec
from lieham.envs import CollectionPlan, Pendulum, PlanarVehicle, Quadrotor, Reference, default_plan, reference_duration
from lieham.evaluation import architecture_metrics, kinetic_scale
from lieham.training import TrainConfig, estimate_scale, train
from test_dynamics import random_states
from test_odeint import loss_fn, small_model, so3_batch


@pytest.fixture(scope="module", autouse=True)
def one_thread():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


def _fmt(x):
    return f"{x:.3g}"


# ------------------------------------------------------------ 1. group kernel

def _alg(group, rng, max_angle=np.pi - 1e-3):
    xi = rng.normal(size=lg.ALGEBRA_DIM[group])
    rot = {"SO2": slice(0, 1), "SO3": slice(0, 3), "SE2": slice(2, 3), "SE3": slice(3, 6)}[group]
    n = np.linalg.norm(xi[rot])
    if n > max_angle:
        xi[rot] *= rng.uniform(0, max_angle) / n
    return xi


def test_c1_group_kernel(criterion):
    rng = np.random.default_rng(0)
    worst = dict.fromkeys(["exp_log", "hat_vee", "projector", "duality", "coad"], 0.0)
    t0 = time.perf_counter()
    for group in lg.GROUPS:
        n, d = lg.MATRIX_SIZE[group], lg.ALGEBRA_DIM[group]
        for _ in range(1000):
            xi = _alg(group, rng)
            g = lg.exp_map(xi, group)
            worst["exp_log"] = max(worst["exp_log"], np.abs(lg.log_map(g, group) - xi).max(),
                                   np.abs(lg.exp_map(lg.log_map(g, group), group) - g).max())
            worst["hat_vee"] = max(worst["hat_vee"], np.abs(lg.vee(lg.hat(xi, group), group) - xi).max())
            A = rng.normal(size=(n, n))
            P = lg.project_dual(A, group)
            worst["projector"] = max(worst["projector"], np.abs(lg.project_dual(P, group) - P).max())
            eta = rng.normal(size=(n, n))
            psi = lg.hat(rng.normal(size=d), group)
            # <T*_e L_q(eta), psi> = <eta, q psi>
            worst["duality"] = max(worst["duality"], abs(lg.pairing(lg.dual_left_translate(g, eta, group), psi)
                                                         - lg.pairing(eta, g @ psi)))
            zeta, p = rng.normal(size=(2, d))
            generic = lg.matrix_to_momentum(lg.coad_star_matrix(lg.hat(zeta, group),
                                                                lg.momentum_to_matrix(p, group), group), group)
            worst["coad"] = max(worst["coad"], np.abs(generic - lg.coad_star(zeta, p, group)).max())
    elapsed = time.perf_counter() - t0
    ok = [criterion(1, k, v <= 1e-10, f"max err {_fmt(v)} over 4x1000 cases") for k, v in worst.items()]
    ok.append(criterion(1, "runtime", elapsed < 10, f"{elapsed:.2f} s"))
    assert all(ok)


# ------------------------------------------------------------ 2. gradients

def _rel(a, b):
    return float(torch.linalg.norm(a - b).detach() / torch.linalg.norm(b).detach())


def test_c2_gradient_fidelity(criterion):
    h = 1e-6
    head_err, grad_err = 0.0, 0.0
    for group, preset in (("SO3", "pendulum_desk"), ("SE2", "se2_desk"), ("SE3", "quadrotor_desk")):
        model = build_model(model_spec(preset, seed=11, dissipation=True))
        q, p = random_states(group, 3, 12)
        for head in (model.mass_inverse, model.potential, model.input_matrix, model.dissipation):
            jac = torch.autograd.functional.jacobian(lambda x: head(x).sum(0), q)
            fd = torch.stack([(head(q + h * e) - head(q - h * e)).sum(0) / (2 * h)
                              for e in torch.eye(q.shape[1], dtype=torch.float64)], -1)
            jac = jac.sum(-2)  # heads act row-wise, so summing the batch axis is exact
            head_err = max(head_err, _rel(jac, fd))
        x = torch.cat([q, p], 1)
        dHdq, zeta = model.hamiltonian_gradients(x)
        with torch.no_grad():
            fd = torch.stack([(model.hamiltonian(x + h * e) - model.hamiltonian(x - h * e)) / (2 * h)
                              for e in torch.eye(x.shape[1], dtype=torch.float64)], 1)
        grad_err = max(grad_err, _rel(dHdq, fd[:, :model.nq]), _rel(zeta, fd[:, model.nq:]))

    model, batch = small_model(), so3_batch()
    _, grads = ode.loss_gradient(model, batch, loss_fn, "backprop", 2)
    g = torch.cat([v.reshape(-1) for v in grads])
    theta = nets.flat_params(model)
    fd = torch.zeros_like(theta)
    for i in range(len(theta)):
        vals = []
        for s in (1, -1):
            t = theta.clone()
            t[i] += s * h
            nets.set_flat_params(model, t)
            with torch.no_grad():
                x0 = model.encode(batch["q0"], batch["zeta0"])
                xs = ode.odeint_rk4(lambda x: model.flow(x, batch["u"]), x0, batch["t"], 2)
                vals.append(float(loss_fn([model.decode(x) for x in xs[1:]], batch)))
        fd[i] = (vals[0] - vals[1]) / (2 * h)
    nets.set_flat_params(model, theta)
    bp_err = _rel(g, fd)

    model, batch = small_model(), so3_batch(seed=1)
    _, ga = ode.loss_gradient(model, batch, loss_fn, "adjoint", 4)
    _, gb = ode.loss_gradient(model, batch, loss_fn, "backprop", 4)
    adj_err = _rel(torch.cat([v.reshape(-1) for v in ga]), torch.cat([v.reshape(-1) for v in gb]))

    ok = [criterion(2, "network heads vs FD", head_err <= 1e-5, f"rel {_fmt(head_err)}"),
          criterion(2, "hamiltonian_gradients vs FD", grad_err <= 1e-5, f"rel {_fmt(grad_err)}"),
          criterion(2, f"backprop vs FD ({len(theta)} params)", bp_err <= 1e-4 and len(theta) == 50,
                    f"rel {_fmt(bp_err)}"),
          criterion(2, "adjoint vs backprop", adj_err <= 1e-3, f"rel {_fmt(adj_err)}")]
    assert all(ok)


# ------------------------------------------------------------ 3. energy conservation

def _energy_drift(model, q0, z0, duration=10.0, atol=1e-8):
    t = np.linspace(0, duration, 101)
    u = torch.zeros(len(q0), model.m, dtype=torch.float64)
    _, _, xs = ode.rollout(model, q0, z0, u, t, "dopri5", rtol=1e-8, atol=atol)
    with torch.no_grad():
        H = torch.stack([model.energy(x) for x in xs]).numpy()
    return float((np.abs(H - H[0]) / np.abs(H[0])).max())


def test_c3_energy_conservation(criterion):
    ok = []
    for group, preset in (("SO3", "pendulum_desk"), ("SE2", "se2_desk"), ("SE3", "quadrotor_desk")):
        drift = 0.0
        for seed in range(3):
            model = build_model(model_spec(preset, seed=20 + seed))
            q, z = random_states(group, 4, 30 + seed)
            drift = max(drift, _energy_drift(model, q, 0.5 * z))
        ok.append(criterion(3, f"random {group} models", drift <= 1e-6, f"rel drift {_fmt(drift)}"))
    envs = {"pendulum": (Pendulum(), Pendulum().truth_model(dissipation=False)),
            "se2": (PlanarVehicle(), PlanarVehicle().truth_model()),
            "quadrotor": (Quadrotor(), Quadrotor().truth_model(dissipation=False))}
    for name, (env, model) in envs.items():
        q, z = env.sample_states(8, seed=3)
        # the quadrotor's rotational momenta are ~1e-5, so atol must sit well below them
        drift = _energy_drift(model, torch.as_tensor(q), torch.as_tensor(z), atol=1e-12)
        ok.append(criterion(3, f"{name} env", drift <= 1e-6, f"rel drift {_fmt(drift)}"))
    assert all(ok)


# ------------------------------------------------------------ 4/5. pendulum

PEND = Pendulum(friction=0.0)


@pytest.fixture(scope="module")
def pend_data():
    return PEND.collect(CollectionPlan(1024, 5, 0.05, seed=0), dissipation=False)


def _pend_model(arch, data):
    model = build_model(model_spec("pendulum_desk", arch, seed=0))
    res = train(model, data, TrainConfig(iterations=2000, lr=1e-3, substeps=2))
    return model, res


@pytest.fixture(scope="module")
def pend_runs(pend_data):
    truth = PEND.truth_model(dissipation=False)
    q0, z0 = PEND.to_state(np.pi / 2, 0.0)
    tq, tz = PEND.sample_states(32, seed=1)
    out = {}
    for arch in ("structured", "unstructured", "blackbox"):
        t0 = time.perf_counter()
        model, res = _pend_model(arch, pend_data)
        metrics = architecture_metrics(model, truth, pend_data, q0[0], z0[0], tq, tz, duration=50.0, dt=0.05,
                                       horizon=2.0, substeps=2)
        out[arch] = (model, res, metrics, time.perf_counter() - t0)
    return out


def test_c4_pendulum_learning(criterion, pend_runs):
    model, res, m, seconds = pend_runs["structured"]
    trace = m["_trace"]
    kin = kinetic_scale(model, trace["q"], trace["zeta"])
    sq, _ = PEND.sample_states(256, seed=2)
    # only the z-axis entries are excited by planar motion
    masks = {"mass_inverse": np.outer(np.eye(3)[2], np.eye(3)[2]), "input": np.array([[0.0], [0.0], [1.0]])}
    fit = estimate_scale(model, PEND.truth_model(dissipation=False), sq, masks)
    with torch.no_grad():
        qt = torch.as_tensor(sq)
        minv = fit.beta * float(model.mass_inverse(qt)[:, 2, 2].mean())
        b = float(model.input_matrix(qt)[:, 2, 0].mean()) / fit.beta
    ok = [criterion(4, "(a) final training loss", m["training_loss"] <= 1e-4, _fmt(m["training_loss"])),
          criterion(4, "(b) 50 s constraint drift", max(m["det_err"], m["orth_err"]) <= 1e-2,
                    f"det {_fmt(m['det_err'])}, orth {_fmt(m['orth_err'])}"),
          criterion(4, "(c) H std / kinetic scale", m["energy_std"] / kin <= 1e-2, _fmt(m["energy_std"] / kin)),
          criterion(4, "(d) 2 s angle prediction error", m["prediction_error_angle"] <= 0.05,
                    f"{_fmt(m['prediction_error_angle'])} rad"),
          criterion(4, "(e) scaled M^-1 and B", abs(minv - 3) <= 0.45 and abs(b - 1) <= 0.15,
                    f"M^-1 {minv:.4f}, B {b:.4f}, beta {fit.beta:.4f}"),
          criterion(4, "runtime", seconds <= 1800, f"{seconds:.0f} s")]
    assert all(ok)


def test_c5_architecture_ordering(criterion, pend_runs):
    m = {a: pend_runs[a][2] for a in pend_runs}
    energy = {a: m[a]["energy_std"] for a in m}
    cons = {a: max(m[a]["det_err"], m[a]["orth_err"]) for a in m}
    ok = []
    for name, vals in (("energy std", energy), ("constraint violation", cons)):
        s, u, b = vals["structured"], vals["unstructured"], vals["blackbox"]
        ok.append(criterion(5, name, 10 * s <= u and 10 * u <= b,
                            f"structured {_fmt(s)} < unstructured {_fmt(u)} < black-box {_fmt(b)}"))
    assert all(ok)


# ------------------------------------------------------------ 6. SE(2)

@pytest.fixture(scope="module")
def se2_run():
    env = PlanarVehicle()
    data = env.collect(default_plan("se2", 0))
    model = build_model(model_spec("se2_desk", seed=0))
    train(model, data, TrainConfig(iterations=3000, lr=3e-3, lr_decay=0.1))
    return env, data, model


def _scalar_dev(A):
    s = np.trace(A, axis1=-2, axis2=-1) / A.shape[-1]
    return np.abs(A - s[:, None, None] * np.eye(A.shape[-1])).max(axis=(-2, -1)) / np.abs(s)


def test_c6_se2_structure(criterion, se2_run):
    env, data, model = se2_run
    q = data.q[:, 0]
    g = DEFAULT_GAINS["se2"]
    gm = to_gauge(model, g.gauge, q)
    with torch.no_grad():
        qt = torch.as_tensor(q)
        Mi, B = gm.mass_inverse(qt).numpy(), gm.input_matrix(qt).numpy()
    dev_m = _scalar_dev(Mi[:, :2, :2])
    # the per-block gauge already divides B_v by beta_v and B_w by beta_w
    dev_b = _scalar_dev(B)
    ok = [criterion(6, "M_v^-1 scalar", dev_m.mean() <= 0.10,
                    f"mean rel dev {_fmt(dev_m.mean())} (max {_fmt(dev_m.max())}) over dataset states"),
          criterion(6, "M_w^-1 scalar", Mi.shape[-1] == 3, "1x1 block on SE(2)"),
          criterion(6, "B scalar after gauge", dev_b.mean() <= 0.10,
                    f"mean rel dev {_fmt(dev_b.mean())} (max {_fmt(dev_b.max())}) over dataset states")]
    assert all(ok)


def test_c6_se2_tracking(criterion, se2_run):
    env, data, model = se2_run
    ref = Reference("horizontal_lemniscate", {"center": [0, 0, 0], "size": 1.0, "rate": 0.5})
    r0 = ref(0.0)
    q0, z0 = env.to_state(r0["p"][0], r0["p"][1], 0.0, *r0["dp"][:2], 0.0)
    g = DEFAULT_GAINS["se2"]
    ctrl = TrackingController(to_gauge(model, g.gauge, data.q[:, 0]), g, ref)
    res = simulate_closed_loop(env.truth_model(), ctrl, q0, z0, reference_duration(ref.kind, ref.params), 1 / 240, 4)
    err = tracking_errors(res, "SE2")
    assert criterion(6, "lemniscate mean position error", err["mean_pos_err"] <= 0.1,
                     f"{_fmt(err['mean_pos_err'])} m")


# ------------------------------------------------------------ 7. quadrotor

QUAD = Quadrotor()


@pytest.fixture(scope="module")
def quad_run():
    data = QUAD.collect(default_plan("quadrotor", 0))
    model = build_model(model_spec("quadrotor_desk", seed=0))
    train(model, data, TrainConfig(iterations=800, lr=1e-2))
    return data, to_gauge(model, DEFAULT_GAINS["quadrotor"].gauge, data.q[:, 0])


@pytest.fixture(scope="module")
def quad_tracking(quad_run):
    _, model = quad_run
    ref = Reference("diamond", {"center": [0, 0, 1.0], "size": 0.5})
    r0 = ref(0.0)
    q0, z0 = QUAD.to_state(r0["p"], np.eye(3), np.zeros(3), np.zeros(3))
    ctrl = TrackingController(model, DEFAULT_GAINS["quadrotor"], ref)
    res = simulate_closed_loop(QUAD.truth_model(), ctrl, q0, z0, reference_duration(ref.kind, ref.params),
                               1 / 240, 4)
    return res, tracking_errors(res, "SE3")


def test_c7_quadrotor_structure(criterion, quad_run):
    data, model = quad_run
    with torch.no_grad():
        Bv = model.input_matrix(torch.as_tensor(data.q[:, 0])).numpy()[:, :3, :]
    flat = np.abs(Bv).reshape(len(Bv), -1)
    dom = int(np.abs(Bv.mean(0)).argmax())
    ratio = (np.delete(flat, dom, axis=1).max(1) / flat[:, dom]).max()
    qs, _ = QUAD.sample_states(500, seed=5)
    with torch.no_grad():
        V = model.potential(torch.as_tensor(qs)).numpy()
    X = np.c_[qs[:, 2], np.ones(len(qs))]
    coef, *_ = np.linalg.lstsq(X, V, rcond=None)
    r2 = 1 - ((V - X @ coef) ** 2).sum() / ((V - V.mean()) ** 2).sum()
    ok = [criterion(7, "B_v thrust structure", dom == 8 and ratio <= 0.05,
                    f"dominant entry (z, thrust); worst off-structure ratio {_fmt(ratio)}"),
          criterion(7, "V affine in z", r2 >= 0.99, f"R^2 {r2:.5f}")]
    assert all(ok)


def test_c7_quadrotor_tracking_error(criterion, quad_tracking):
    res, err = quad_tracking
    bounded = bool(np.all(np.isfinite(res.q))) and err["max_pos_err"] < 1.0
    assert criterion(7, "diamond mean position error", bounded and err["mean_pos_err"] <= 0.2,
                     f"mean {_fmt(err['mean_pos_err'])} m, max {_fmt(err['max_pos_err'])} m")


def test_c7_quadrotor_hd_monotone(criterion, quad_tracking):
    _, err = quad_tracking
    assert criterion(7, "monotone H_d", err["Hd_max_increase"] <= 1e-6,
                     f"largest step increase {_fmt(err['Hd_max_increase'])}, "
                     f"{err['Hd_violations']} steps above 1e-6")


# ------------------------------------------------------------ 8. controller

def test_c8_controller(criterion, quad_tracking):
    rng = np.random.default_rng(8)
    model = QUAD.truth_model()
    gen = 0.0
    for _ in range(500):
        R = lg.so3_exp(rng.normal(size=3))
        s = lift(model, *QUAD.to_state(rng.normal(size=3), R, rng.normal(size=3), rng.normal(size=3)))
        ref = DesiredState(rng.normal(size=3), lg.so3_exp(rng.normal(size=3)), *rng.normal(size=(4, 3)))
        g = Gains(*(np.diag(rng.uniform(0.1, 5, 3)) for _ in range(4)))
        a, b = idapbc_se3(s, ref, g), idapbc_generic(s, ref, g)
        gen = max(gen, np.abs(a - b).max() / max(1.0, np.abs(a).max()))
    gram = 0.0
    for _ in range(1000):
        F = rng.normal(size=3) + np.array([0, 0, 2.0])
        Rd, _ = quad_reference(F, rng.normal(size=3), rng.uniform(-3, 3), rng.normal())
        gram = max(gram, np.abs(Rd.T @ Rd - np.eye(3)).max())
    lat = quad_tracking[1]["latency_ms"]
    ok = [criterion(8, "generic == SE(3) form", gen <= 1e-9, f"max rel diff {_fmt(gen)} over 500 states"),
          criterion(8, "quad_reference Gram error", gram <= 1e-12, _fmt(gram)),
          criterion(8, "latency per control call", lat <= 5.0, f"{lat:.2f} ms (learned quadrotor model)")]
    assert all(ok)


# ------------------------------------------------------------ 9. scale invariance

def test_c9_scale_invariance(criterion):
    worst = 0.0
    t = np.linspace(0, 5, 501)
    for group, preset in (("SO3", "pendulum_desk"), ("SE2", "se2_desk"), ("SE3", "quadrotor_desk")):
        model = build_model(model_spec(preset, seed=40, dissipation=True))
        q, z = random_states(group, 3, 41)
        u = 0.1 * torch.randn(3, model.m, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        qa, _, _ = ode.rollout(model, q, 0.3 * z, u, t, "rk4")
        for beta in (0.05, 3.0, 40.0):
            qb, _, _ = ode.rollout(model.scaled(beta), q, 0.3 * z, u, t, "rk4")
            worst = max(worst, float((qa - qb).abs().max()))
    assert criterion(9, "q-trajectory change under beta", worst <= 1e-9, f"max {_fmt(worst)} over 5 s")


def test_c1_exp_agrees_with_expm():
    # supplementary oracle for criterion 1: closed-form exp against scipy
    rng = np.random.default_rng(1)
    for group in lg.GROUPS:
        for _ in range(50):
            xi = _alg(group, rng)
            assert np.abs(lg.exp_map(xi, group) - expm(lg.hat(xi, group))).max() < 1e-10
