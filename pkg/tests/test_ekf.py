import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfddqn.ekf import (EKFConfig, EKFState, NonPositiveInnovationVariance, ekf_batch_update,
                        ekf_predict, ekf_update_scalar, kf_oracle)
from pfddqn.neuralnet import LayerSpec, flatten, forward, init_network, unflatten

LINEAR = LayerSpec((1, 1))  # Q(x) = w * x + b, theta = (w, b)


def full_state(theta, P, q=0.0, r=1.0):
    return EKFState(np.array(theta, float), np.array(P, float), q, r)


class TestConfig:
    def test_defaults(self):
        c = EKFConfig()
        assert (c.p0, c.q_proc, c.r_obs) == (1e-2, 1e-6, 1.0)

    def test_auto_mode(self):
        assert EKFConfig().resolve_mode(2) == "full"
        assert EKFConfig().resolve_mode(1833) == "diagonal"
        assert EKFConfig(mode="full").resolve_mode(1833) == "full"
        with pytest.raises(ValueError):
            EKFConfig(mode="banded").resolve_mode(3)

    def test_initial(self):
        s = EKFState.initial(np.zeros(3), EKFConfig(p0=0.5, mode="full"))
        np.testing.assert_array_equal(s.P, 0.5 * np.eye(3))
        d = EKFState.initial(np.zeros(3), EKFConfig(p0=0.5, mode="diagonal"))
        assert d.diagonal and d.trace() == pytest.approx(1.5)


class TestPredict:
    def test_zero_q(self):
        s = full_state([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_array_equal(ekf_predict(s).P, s.P)

    def test_theta_unchanged(self):
        s = full_state([1.0, -2.0], np.eye(2), q=0.7)
        np.testing.assert_array_equal(ekf_predict(s).theta_hat, s.theta_hat)

    def test_diagonal_hand(self):
        s = EKFState(np.zeros(2), np.array([1.0, 2.0]), 0.5, 1.0)
        np.testing.assert_array_equal(ekf_predict(s).P, [1.5, 2.5])

    def test_full_adds_identity(self):
        s = full_state([0.0, 0.0], [[1.0, 0.2], [0.2, 3.0]], q=0.1)
        np.testing.assert_allclose(ekf_predict(s).P, [[1.1, 0.2], [0.2, 3.1]])


class TestScalarUpdate:
    def test_hand_gain(self):
        s = ekf_update_scalar(full_state([0.0], [[1.0]]), z=2.0, h_val=0.0, H=[1.0])
        assert s.theta_hat[0] == pytest.approx(1.0)
        assert s.P[0, 0] == pytest.approx(0.5)

    def test_zero_prior(self):
        s = ekf_update_scalar(full_state([3.0, 4.0], np.zeros((2, 2))), 10.0, 0.0, [1.0, 1.0])
        np.testing.assert_array_equal(s.theta_hat, [3.0, 4.0])

    def test_zero_innovation_still_shrinks(self):
        s0 = full_state([1.0, 1.0], np.eye(2))
        s = ekf_update_scalar(s0, 5.0, 5.0, [1.0, 0.0])
        np.testing.assert_array_equal(s.theta_hat, s0.theta_hat)
        assert s.P[0, 0] < 1.0 and s.P[1, 1] == 1.0

    def test_input_not_mutated(self):
        s0 = full_state([0.0], [[1.0]])
        ekf_update_scalar(s0, 1.0, 0.0, [1.0])
        assert s0.theta_hat[0] == 0.0 and s0.P[0, 0] == 1.0

    def test_non_positive_innovation(self):
        with pytest.raises(NonPositiveInnovationVariance):
            ekf_update_scalar(full_state([0.0], [[-2.0]], r=1.0), 0.0, 0.0, [1.0])

    def test_shape_check(self):
        with pytest.raises(ValueError):
            ekf_update_scalar(full_state([0.0, 0.0], np.eye(2)), 0.0, 0.0, [1.0])

    def test_gain_limit(self):
        s0 = full_state([0.3, -0.1], np.eye(2), r=1e12)
        s = ekf_update_scalar(s0, 100.0, 0.0, [1.0, 1.0])
        assert np.max(np.abs(s.theta_hat - s0.theta_hat)) <= 1e-9 * max(1.0, np.abs(s0.theta_hat).max())

    def test_diagonal_keeps_diagonal_of_full_update(self):
        P = np.array([0.5, 2.0, 1.0])
        H = np.array([1.0, -0.5, 2.0])
        d = ekf_update_scalar(EKFState(np.zeros(3), P, 0.0, 1.0), 1.0, 0.0, H)
        f = ekf_update_scalar(full_state(np.zeros(3), np.diag(P)), 1.0, 0.0, H)
        np.testing.assert_allclose(d.P, np.diag(f.P), rtol=1e-14)
        np.testing.assert_allclose(d.theta_hat, f.theta_hat, rtol=1e-14)


def random_psd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + 0.1 * np.eye(d)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(1, 12))
def test_full_mode_stays_symmetric_positive(seed, d, n):
    rng = np.random.default_rng(seed)
    s = full_state(rng.normal(size=d), random_psd(rng, d), q=1e-3, r=rng.uniform(0.1, 2.0))
    for _ in range(n):
        s = ekf_predict(s)
        s = ekf_update_scalar(s, rng.normal(), rng.normal(), rng.normal(size=d))
        assert np.max(np.abs(s.P - s.P.T)) <= 1e-9
        assert np.all(np.diag(s.P) > 0)


def test_positive_diagonal_many_sequences():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        d = int(rng.integers(1, 5))
        s = EKFState(rng.normal(size=d), rng.uniform(1e-3, 2.0, d), 1e-4, rng.uniform(0.01, 3.0))
        for _ in range(3):
            s = ekf_update_scalar(s, rng.normal(), rng.normal(), rng.normal(size=d) * 3)
        assert np.all(s.P > 0)


class TestBatchUpdate:
    def test_already_fitted(self):
        spec = LayerSpec((3, 4, 2))
        params = init_network(spec, 0)
        X = np.random.default_rng(0).normal(size=(5, 3))
        a = np.array([0, 1, 1, 0, 1])
        z = forward(params, X)[np.arange(5), a]
        s0 = EKFState.initial(flatten(params), EKFConfig(mode="full"))
        s = ekf_batch_update(s0, X, a, z, spec)
        np.testing.assert_allclose(s.theta_hat, flatten(params), atol=1e-15)

    def test_trace_monotone_without_process_noise(self):
        spec = LayerSpec((3, 4, 2))
        rng = np.random.default_rng(1)
        s = EKFState.initial(flatten(init_network(spec, 1)), EKFConfig(q_proc=0.0, mode="full"))
        traces = [s.trace()]
        for x, a, z in zip(rng.normal(size=(8, 3)), rng.integers(0, 2, 8), rng.normal(size=8)):
            s = ekf_batch_update(s, x[None], [a], [z], spec)
            traces.append(s.trace())
        assert all(b <= t + 1e-12 for t, b in zip(traces, traces[1:]))

    def test_linear_net_matches_oracle(self):
        rng = np.random.default_rng(2)
        q, r, p0 = 0.05, 0.4, 0.8
        theta0 = np.array([0.3, -0.2])
        s = EKFState.initial(theta0, EKFConfig(p0=p0, q_proc=q, r_obs=r, mode="full"))
        steps = []
        for _ in range(25):
            xs = rng.normal(size=4)
            zs = rng.normal(size=4) * 2
            steps.append([(z, [x, 1.0]) for x, z in zip(xs, zs)])
            s = ekf_batch_update(s, xs[:, None], [0] * 4, zs, LINEAR)
            theta_ref, P_ref = kf_oracle(steps, q, r, p0, theta0)[-1]
            np.testing.assert_allclose(s.theta_hat, theta_ref, rtol=0, atol=1e-9)
            np.testing.assert_allclose(s.P, P_ref, rtol=0, atol=1e-9)

    def test_mismatched_batch(self):
        s = EKFState.initial(np.zeros(2), EKFConfig())
        with pytest.raises(ValueError):
            ekf_batch_update(s, np.zeros((2, 1)), [0], [1.0, 2.0], LINEAR)

    def test_default_net_diagonal_runs(self):
        spec = LayerSpec()
        params = init_network(spec, 3)
        rng = np.random.default_rng(3)
        s = EKFState.initial(flatten(params), EKFConfig())
        assert s.diagonal
        s2 = ekf_batch_update(s, rng.normal(size=(4, 14)), [0, 3, 5, 8], rng.normal(size=4), spec)
        assert np.all(np.isfinite(s2.theta_hat)) and np.all(s2.P > 0)
        assert unflatten(spec, s2.theta_hat).spec == spec


class TestOracle:
    def test_constant_state_asymptote(self):
        # q = 0, n identical unit measurements of theta: P_n = r / (n + r / P0)
        r, p0, z = 0.5, 2.0, 3.0
        out = kf_oracle([[(z, [1.0])]] * 40, 0.0, r, p0, [0.0])
        for n, (theta, P) in enumerate(out, start=1):
            assert P[0, 0] == pytest.approx(r / (n + r / p0), rel=1e-12)
            assert theta[0] == pytest.approx(z * n / (n + r / p0), rel=1e-12)

    def test_no_measurements(self):
        out = kf_oracle([[], [], []], 0.0, 1.0, np.eye(2), [1.0, 2.0])
        for theta, P in out:
            np.testing.assert_array_equal(theta, [1.0, 2.0])
            np.testing.assert_array_equal(P, np.eye(2))

    def test_single_step_equals_scalar_update(self):
        H = np.array([0.7, -1.2])
        (theta, P), = kf_oracle([[(1.5, H)]], 0.0, 0.3, [[1.0, 0.2], [0.2, 0.5]], [0.1, 0.4])
        s = ekf_update_scalar(full_state([0.1, 0.4], [[1.0, 0.2], [0.2, 0.5]], r=0.3),
                              1.5, float(H @ [0.1, 0.4]), H)
        np.testing.assert_allclose(s.theta_hat, theta, atol=1e-12)
        np.testing.assert_allclose(s.P, P, atol=1e-12)
