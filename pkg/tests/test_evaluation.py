import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lieham import evaluation as ev
from lieham.dynamics import build_model, model_spec
from lieham.envs import CollectionPlan, Pendulum


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.3))
def test_nearest_rotation_recovers_perturbed_rotation(seed, eps):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=seed).as_matrix()
    A = R + eps * 1e-3 * rng.normal(size=(3, 3))
    P = ev.nearest_rotation(A)
    assert np.allclose(P.T @ P, np.eye(3), atol=1e-12) and np.isclose(np.linalg.det(P), 1.0)
    assert np.abs(P - R).max() < 1e-3


def test_nearest_rotation_flags_nonfinite():
    A = np.stack([np.eye(3), np.full((3, 3), np.nan)])
    P = ev.nearest_rotation(A)
    assert np.array_equal(P[0], np.eye(3)) and np.all(np.isnan(P[1]))


def test_rotation_angle_error_matches_scipy():
    a, b = Rotation.random(50, random_state=3), Rotation.random(50, random_state=4)
    got = ev.rotation_angle_error(a.as_matrix(), b.as_matrix())
    assert np.allclose(got, (a.inv() * b).magnitude(), atol=1e-7)
    th = np.array([0.3, -2.0])
    R2 = np.stack([[[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]] for t in th])
    assert np.allclose(ev.rotation_angle_error(R2, np.eye(2)), np.abs(th))


@pytest.fixture(scope="module")
def pend():
    env = Pendulum()
    truth = env.truth_model(dissipation=False)
    data = env.collect(CollectionPlan(8, 5, 0.05, seed=0), dissipation=False)
    return env, truth, data


def test_truth_model_scores_perfectly(pend):
    env, truth, data = pend
    q0, z0 = env.to_state(1.0, 0.5)
    tq, tz = env.sample_states(4)
    m = ev.architecture_metrics(truth, truth, data, q0[0], z0[0], tq, tz, duration=2.0, dt=0.05,
                                horizon=1.0, substeps=20)
    assert m["training_loss"] < 1e-10 and m["prediction_error"] < 1e-7
    assert m["energy_std"] < 1e-6 * m["energy_true_initial"] and m["rollout_finite"]
    assert {"det_err", "orth_err", "energy_mean", "prediction_error_angle", "_trace"} <= set(m)


def test_diverged_prediction_counts_as_pi(pend):
    env, truth, _ = pend

    class Exploding:
        arch, m = "blackbox", 1

        def encode(self, q, z):
            return truth.encode(q, z)

        def decode(self, x):
            q, z = truth.decode(x)
            return q * np.nan, z

        def flow(self, x, u):
            return truth.flow(x, u)

    tq, tz = env.sample_states(3)
    pe = ev.prediction_errors(Exploding(), truth, tq, tz, 0.2, 0.05)
    assert pe["angle"] == pytest.approx(np.pi)


def test_blackbox_energy_needs_truth(pend):
    env, truth, _ = pend
    bb = build_model(model_spec("pendulum_desk", "blackbox", seed=0))
    q, z = env.to_state(0.4, 0.0)
    with pytest.raises(ValueError):
        ev.model_energy(bb, q, z)
    assert np.allclose(ev.model_energy(bb, q, z, truth), ev.model_energy(truth, q, z))


def test_kinetic_scale(pend):
    env, truth, _ = pend
    q, z = env.to_state([0.1, 1.0], [1.0, 3.0])
    # p = phi_dot / 3, kinetic = phi_dot^2 / 6
    assert np.isclose(ev.kinetic_scale(truth, q, z), (1 + 9) / 6 / 2)
