import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from waitermpc.estimation import (
    BallFilter,
    KalmanFilter,
    ball_matrices,
    kf_predict,
    kf_update,
    predict_ball_tube,
    robot_filter,
)
from waitermpc.kinematics import GRAVITY, discrete_matrices, integrate_vector


def ballistic(p0, v0, t):
    return p0 + v0 * t + 0.5 * GRAVITY * t**2


def run_robot(rng, x0, x_hat0, steps=100, dt=0.008):
    x, f = x0.copy(), robot_filter(x_hat0, dt=dt)
    for _ in range(steps):
        u = 5.0 * rng.normal(size=9)
        x = integrate_vector(x, u, dt)
        f = kf_predict(f, u)
        f = kf_update(f, x[:9])
    return x, f


def run_ball(p0, v0, updates, dt=0.01):
    """Feed noiseless samples; returns the filter and the time of the last sample."""
    bf = BallFilter(dt=dt)
    t, fused = 0.0, 0
    while fused < updates:
        bf.step(ballistic(p0, v0, t))
        if bf.active and t > 0:
            fused += 1
        t += dt
    return bf, t - dt


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_robot_tracking(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=27)
    x, f = run_robot(rng, x0, x0)
    assert np.abs(f.mean - x).max() <= 1e-6


def test_robot_estimate_converges_from_wrong_start():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=27)
    errs = []
    for steps in (50, 150, 300):
        x, f = run_robot(np.random.default_rng(1), x0, x0 + 0.01 * np.ones(27), steps=steps)
        errs.append(np.abs(f.mean - x).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def test_robot_filter_constants():
    f = robot_filter(np.zeros(27))
    A, B = discrete_matrices(0.008, 9)
    np.testing.assert_allclose(f.A, A)
    np.testing.assert_allclose(f.Q, 10.0 * B @ B.T)
    np.testing.assert_allclose(f.R, 1e-3 * np.eye(9))
    np.testing.assert_allclose(f.cov, 0.1 * np.eye(27))


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-6, 6), min_size=3, max_size=3),
)
def test_ball_prediction_half_second_ahead(p, v):
    p0 = np.array(p) * [1.0, 1.0, 0.0] + [0.0, 0.0, 1.5]
    v0 = np.array(v) * [1.0, 1.0, 0.0] + [0.0, 0.0, 3.0 + abs(v[2])]  # above the activation height throughout
    bf, t = run_ball(p0, v0, 10)
    pred = predict_ball_tube(bf.mean, [0.5])[0]
    assert np.linalg.norm(pred - ballistic(p0, v0, t + 0.5)) <= 1e-3


def test_ball_filter_activation():
    bf = BallFilter()
    bf.step([0.0, 0.0, 0.5])
    bf.step(None)
    assert not bf.active
    bf.step([0.0, 0.0, 1.2])
    assert not bf.active
    bf.step([0.05, 0.0, 1.25])
    assert bf.active
    np.testing.assert_allclose(bf.mean[:3], [0.05, 0.0, 1.25])
    A, B, C = ball_matrices(0.01)
    np.testing.assert_allclose(bf.kf.Q, 1000.0 * B @ B.T)
    np.testing.assert_allclose(bf.kf.cov, np.eye(6))


def test_ball_filter_predicts_through_missing_samples():
    p0, v0 = np.array([0.0, 0.0, 1.5]), np.array([2.0, 0.0, 3.0])
    bf, t = run_ball(p0, v0, 3)
    for _ in range(5):
        bf.step(None)
        t += 0.01
    np.testing.assert_allclose(bf.mean[:3], ballistic(p0, v0, t), atol=1e-9)


def _random_filter(rng):
    n = 4
    M = rng.normal(size=(n, n))
    return KalmanFilter(
        A=np.eye(n) + 0.1 * rng.normal(size=(n, n)),
        B=rng.normal(size=(n, 1)),
        C=rng.normal(size=(2, n)),
        Q=0.01 * np.eye(n),
        R=0.1 * np.eye(2),
        mean=rng.normal(size=n),
        cov=M @ M.T + 0.1 * np.eye(n),
    )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_covariance_stays_symmetric_positive_definite(seed):
    rng = np.random.default_rng(seed)
    f = _random_filter(rng)
    for _ in range(20):
        f = kf_update(kf_predict(f, rng.normal(size=1)), rng.normal(size=2))
        assert np.array_equal(f.cov, f.cov.T)
        assert np.linalg.eigvalsh(f.cov).min() > 0


def test_update_reduces_covariance():
    f = _random_filter(np.random.default_rng(3))
    g = kf_update(f, np.zeros(2))
    assert np.linalg.eigvalsh(f.cov - g.cov).min() >= -1e-12


def test_non_finite_measurement_rejected():
    f = _random_filter(np.random.default_rng(4))
    g = kf_update(f, [np.nan, 0.0])
    assert g.rejected == 1
    np.testing.assert_array_equal(g.mean, f.mean)
    with pytest.raises(ValueError):
        kf_update(f, np.zeros(3))
