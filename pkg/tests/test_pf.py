import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfddqn.ekf import kf_oracle
from pfddqn.pf import (DegenerateWeights, ParticleSet, PFConfig, UnnormalizedWeights, ess,
                       estimate, filter_step, init_particles, inject, log_likelihoods,
                       maybe_resample, predict, reweight, shift, systematic_indices,
                       systematic_resample, update_weights)


def scalar_q(thetas, obs, actions):
    """Measurement model Q(s, a; theta) = theta[0] for every batch entry."""
    return np.repeat(thetas[:, :1], len(actions), axis=1)


def pset(particles, weights=None):
    particles = np.asarray(particles, dtype=float)
    if particles.ndim == 1:
        particles = particles[:, None]
    n = len(particles)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return ParticleSet(particles, w)


def offspring_counts(weights, u):
    return np.bincount(systematic_indices(weights, u), minlength=len(weights))


class TestConfig:
    def test_defaults(self):
        c = PFConfig()
        assert (c.num_particles, c.process_sigma, c.obs_sigma, c.init_sigma) == (50, 1e-3, 1.0, 1e-2)
        assert c.threshold == 25

    def test_validation(self):
        with pytest.raises(ValueError):
            PFConfig(obs_sigma=0.0)
        with pytest.raises(ValueError):
            PFConfig(process_sigma=-1.0)
        with pytest.raises(ValueError):
            PFConfig(num_particles=10, ess_threshold=11)
        PFConfig(process_sigma=0.0, init_sigma=0.0)


class TestInit:
    def test_uniform_weights(self):
        ps = init_particles(np.zeros(5), PFConfig(num_particles=40), np.random.default_rng(0))
        np.testing.assert_array_equal(ps.weights, np.full(40, 1 / 40))

    def test_tiny_prior(self):
        theta0 = np.linspace(-1, 1, 7)
        ps = init_particles(theta0, PFConfig(init_sigma=1e-12), np.random.default_rng(0))
        np.testing.assert_allclose(estimate(ps), theta0, atol=1e-9)

    def test_sample_mean_clt(self):
        cfg = PFConfig(num_particles=400, init_sigma=0.3)
        theta0 = np.arange(20.0)
        ps = init_particles(theta0, cfg, np.random.default_rng(1))
        bound = 4 * cfg.init_sigma / math.sqrt(cfg.num_particles)
        assert np.all(np.abs(ps.particles.mean(axis=0) - theta0) <= bound)


class TestPredict:
    def test_zero_sigma(self):
        ps = pset(np.arange(6.0))
        out = predict(ps, PFConfig(num_particles=6, process_sigma=0.0), np.random.default_rng(0))
        np.testing.assert_array_equal(out.particles, ps.particles)

    def test_weights_kept(self):
        ps = pset([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
        out = predict(ps, PFConfig(num_particles=3, ess_threshold=1), np.random.default_rng(0))
        np.testing.assert_array_equal(out.weights, ps.weights)

    def test_increment_variance(self):
        sigma = 0.05
        cfg = PFConfig(num_particles=100, process_sigma=sigma)
        ps = ParticleSet(np.zeros((100, 1000)), np.full(100, 0.01))
        inc = predict(ps, cfg, np.random.default_rng(2)).particles - ps.particles
        assert inc.var() == pytest.approx(sigma ** 2, rel=0.1)


class TestLikelihood:
    def test_equal_residuals_keep_priors(self):
        ps = pset([1.0, 1.0], [0.3, 0.7])
        out = update_weights(ps, np.zeros((3, 1)), [0, 0, 0], [4.0, 5.0, 6.0], scalar_q,
                             PFConfig(num_particles=2, ess_threshold=1))
        np.testing.assert_allclose(out.weights, [0.3, 0.7], rtol=1e-12)

    def test_gaussian_ratio(self):
        # residual 0 for A and sigma_obs for B: ratio e^{1/2}
        sigma = 2.0
        ps = pset([3.0, 3.0 + sigma])
        out = update_weights(ps, np.zeros((1, 1)), [0], [3.0], scalar_q,
                             PFConfig(num_particles=2, obs_sigma=sigma, ess_threshold=1))
        assert out.weights[0] / out.weights[1] == pytest.approx(math.exp(0.5), rel=1e-12)
        assert math.exp(0.5) == pytest.approx(1.6487, abs=1e-4)

    def test_batch_averaged(self):
        preds = np.array([[1.0, 3.0]])
        assert log_likelihoods(preds, [0.0, 0.0], 1.0)[0] == pytest.approx(-(1 + 9) / 2 / 2)

    def test_normalized(self):
        rng = np.random.default_rng(3)
        ps = pset(rng.normal(size=30))
        out = update_weights(ps, np.zeros((5, 1)), [0] * 5, rng.normal(size=5), scalar_q,
                             PFConfig(num_particles=30))
        assert abs(out.weights.sum() - 1.0) <= 1e-9

    def test_log_space_stability(self):
        ps = pset([0.0, 1000.0, -1000.0, 1500.0])
        out = update_weights(ps, np.zeros((1, 1)), [0], [1200.0], scalar_q,
                             PFConfig(num_particles=4, obs_sigma=1.0))
        assert np.all(np.isfinite(out.weights))
        assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.argmax(out.weights) == 1

    def test_degenerate(self):
        with pytest.raises(DegenerateWeights):
            reweight([0.5, 0.5], [-np.inf, -np.inf])

    def test_rejects_non_finite_observations(self):
        with pytest.raises(ValueError):
            update_weights(pset([0.0, 1.0]), np.zeros((1, 1)), [0], [np.nan], scalar_q,
                           PFConfig(num_particles=2, ess_threshold=1))


class TestESS:
    def test_uniform(self):
        assert ess(np.full(100, 0.01)) == pytest.approx(100.0)

    def test_single(self):
        assert ess([0.0, 1.0, 0.0]) == 1.0

    def test_hand_values(self):
        assert ess([0.5, 0.25, 0.25]) == pytest.approx(8 / 3)
        assert ess([0.7, 0.3]) == pytest.approx(1 / 0.58)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda w: sum(w) > 1e-6))
    def test_bounds(self, raw):
        w = np.asarray(raw) / np.sum(raw)
        assert 1.0 - 1e-9 <= ess(w) <= len(w) + 1e-9


class TestSystematic:
    def test_single_heavy_particle(self):
        ps = pset([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        out = systematic_resample(ps, np.random.default_rng(0))
        np.testing.assert_array_equal(out.particles[:, 0], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(out.weights, np.full(3, 1 / 3))

    def test_uniform_is_identity(self):
        for u in (0.0, 0.37, 0.999):
            np.testing.assert_array_equal(systematic_indices(np.full(8, 1 / 8), u), np.arange(8))

    def test_seven_three(self):
        # ten particles, all mass on the first two: 7 and 3 offspring for every offset
        w = np.concatenate([[0.7, 0.3], np.zeros(8)])
        for u in np.linspace(0, 1, 50, endpoint=False):
            counts = offspring_counts(w, u)
            assert counts[0] == 7 and counts[1] == 3

    def test_unnormalized(self):
        with pytest.raises(UnnormalizedWeights):
            systematic_resample(pset([0.0, 1.0], [0.5, 0.6]), np.random.default_rng(0))

    def test_maybe_resample_threshold(self):
        cfg = PFConfig(num_particles=4)  # threshold 2
        even = pset(np.arange(4.0))
        assert maybe_resample(even, cfg, np.random.default_rng(0)).resampled == 0
        skewed = pset(np.arange(4.0), [0.85, 0.05, 0.05, 0.05])
        out = maybe_resample(skewed, cfg, np.random.default_rng(0))
        assert out.resampled == 1
        np.testing.assert_array_equal(out.weights, np.full(4, 0.25))

    def test_mean_counts_unbiased(self):
        rng = np.random.default_rng(4)
        for w in ([0.7, 0.3], [0.5, 0.25, 0.25], list(rng.dirichlet(np.ones(10)))):
            w = np.asarray(w)
            reps = 10_000
            total = np.zeros(len(w))
            totsq = np.zeros(len(w))
            for u in rng.random(reps):
                c = offspring_counts(w, u)
                total += c
                totsq += c * c
            mean = total / reps
            sd = np.sqrt(np.maximum(totsq / reps - mean ** 2, 1e-12))
            assert np.all(np.abs(mean - len(w) * w) <= 3 * sd / math.sqrt(reps) + 1e-12)


@pytest.mark.parametrize("w", [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.5]])
def test_offset_just_below_one_stays_in_range(w):
    u = np.nextafter(1.0, 0.0)
    idx = systematic_indices(np.array(w), u)
    assert idx.max() < len(w)
    assert all(w[i] > 0 for i in idx)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30).filter(lambda w: sum(w) > 1e-6),
       st.floats(0.0, 1.0, exclude_max=True))
def test_offspring_within_floor_and_ceil(raw, u):
    w = np.asarray(raw) / np.sum(raw)
    counts = offspring_counts(w, u)
    expected = len(w) * w
    assert counts.sum() == len(w)
    assert np.all(counts >= np.floor(expected - 1e-9))
    assert np.all(counts <= np.ceil(expected + 1e-9))


class TestEstimate:
    def test_identical(self):
        ps = pset(np.tile([[1.5, -2.0]], (5, 1)), np.full(5, 0.2))
        np.testing.assert_allclose(estimate(ps), [1.5, -2.0], rtol=0, atol=1e-15)

    def test_hand(self):
        assert estimate(pset([0.0, 1.0], [0.25, 0.75]))[0] == pytest.approx(0.75)

    def test_permutation(self):
        rng = np.random.default_rng(5)
        parts = rng.normal(size=(20, 4))
        w = rng.dirichlet(np.ones(20))
        perm = rng.permutation(20)
        np.testing.assert_allclose(estimate(pset(parts, w)), estimate(pset(parts[perm], w[perm])),
                                   atol=1e-12)

    def test_requires_normalization(self):
        with pytest.raises(UnnormalizedWeights):
            estimate(pset([0.0, 1.0], [0.2, 0.2]))


class TestCoupling:
    def test_shift(self):
        out = shift(pset([[0.0, 1.0], [2.0, 3.0]]), [1.0, -1.0])
        np.testing.assert_array_equal(out.particles, [[1.0, 0.0], [3.0, 2.0]])

    def test_inject_replaces_lightest(self):
        out = inject(pset([0.0, 1.0, 2.0, 3.0], [0.4, 0.1, 0.3, 0.2]), [9.0])
        assert out.particles[1, 0] == 9.0
        np.testing.assert_allclose(out.weights, np.array([0.4, 0.25, 0.3, 0.2]) / 1.15)
        assert abs(out.weights.sum() - 1.0) <= 1e-12


def run_linear_gaussian(seed, n=1000, steps=50, q_sigma=0.5, r_sigma=1.0, p0_sigma=1.0):
    """PF and exact Kalman means on x_t = x_{t-1} + w, y_t = x_t + v."""
    rng = np.random.default_rng([seed, 99])
    x = rng.normal(0.0, p0_sigma)
    ys = []
    for _ in range(steps):
        x += rng.normal(0.0, q_sigma)
        ys.append(x + rng.normal(0.0, r_sigma))
    kf = [t[0] for t, _ in kf_oracle([[(y, [1.0])] for y in ys], q_sigma ** 2, r_sigma ** 2,
                                     p0_sigma ** 2, [0.0])]
    cfg = PFConfig(num_particles=n, process_sigma=q_sigma, obs_sigma=r_sigma, init_sigma=p0_sigma)
    frng = np.random.default_rng([seed, 3])
    ps = init_particles([0.0], cfg, frng)
    pf = []
    for y in ys:
        ps, est = filter_step(ps, np.zeros((1, 1)), [0], [y], scalar_q, cfg, frng)
        pf.append(est[0])
    return np.array(pf), np.array(kf)


def test_tracks_kalman_mean():
    errs = []
    for seed in range(5):
        pf, kf = run_linear_gaussian(seed)
        errs.append((pf - kf) ** 2)
    assert math.sqrt(np.mean(errs)) <= 0.15 * 1.0


def test_filter_step_deterministic():
    a = run_linear_gaussian(11, n=100, steps=10)
    b = run_linear_gaussian(11, n=100, steps=10)
    np.testing.assert_array_equal(a[0], b[0])
