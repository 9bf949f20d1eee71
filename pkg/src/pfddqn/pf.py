"""Bootstrap particle filter over flat network weight vectors.

State model is a Gaussian random walk on θ; each observation is a TD target
``Z = Q(s, a; θ) + noise``.  Likelihood evaluation is delegated to a
``q_eval(particles, obs, actions) -> (N, B)`` callable so the same filter
serves the Q-network and scalar toy models.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


class DegenerateWeights(FloatingPointError):
    pass


class UnnormalizedWeights(ValueError):
    pass


NORMALIZATION_TOL = 1e-9

QEval = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PFConfig:
    num_particles: int = 50
    process_sigma: float = 1e-3
    obs_sigma: float = 1.0
    init_sigma: float = 1e-2
    ess_threshold: Optional[float] = None  # None means num_particles / 2

    def __post_init__(self):
        if self.num_particles < 2:
            raise ValueError("need at least two particles")
        if self.process_sigma < 0 or self.init_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        if self.obs_sigma <= 0:
            raise ValueError("obs_sigma must be positive")
        if not 1 <= self.threshold <= self.num_particles:
            raise ValueError(f"ess_threshold {self.threshold} outside [1, {self.num_particles}]")

    @property
    def threshold(self) -> float:
        if self.ess_threshold is None:
            return self.num_particles / 2
        return self.ess_threshold


@dataclass
class ParticleSet:
    particles: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,)
    resampled: int = field(default=0, compare=False)

    @property
    def size(self) -> int:
        return self.particles.shape[0]


def _check_normalized(weights):
    if abs(weights.sum() - 1.0) > NORMALIZATION_TOL or np.any(weights < 0):
        raise UnnormalizedWeights(f"weights sum to {weights.sum()!r}")


def init_particles(theta0, cfg: PFConfig, rng: np.random.Generator) -> ParticleSet:
    theta0 = np.asarray(theta0, dtype=np.float64)
    n = cfg.num_particles
    noise = rng.standard_normal((n, theta0.size))
    particles = theta0[None, :] + cfg.init_sigma * noise
    return ParticleSet(particles, np.full(n, 1.0 / n))


def predict(ps: ParticleSet, cfg: PFConfig, rng: np.random.Generator) -> ParticleSet:
    # the draw happens even at zero sigma so stream consumption is config-independent
    noise = rng.standard_normal(ps.particles.shape)
    return ParticleSet(ps.particles + cfg.process_sigma * noise, ps.weights.copy(), ps.resampled)


def log_likelihoods(predictions, observations, obs_sigma: float) -> np.ndarray:
    """Per-particle log-likelihood, batch-averaged squared residual.

    ``predictions`` is (N, B), ``observations`` is (B,).
    """
    z = np.asarray(observations, dtype=np.float64).reshape(1, -1)
    resid = np.asarray(predictions, dtype=np.float64) - z
    return -np.mean(resid * resid, axis=1) / (2.0 * obs_sigma ** 2)


def reweight(weights, loglik) -> np.ndarray:
    """Multiply weights by exp(loglik) in log space and renormalize."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateWeights("all particle weights vanished")
    w = np.exp(logw - top)
    return w / w.sum()


def update_weights(ps: ParticleSet, obs, actions, observations, q_eval: QEval,
                   cfg: PFConfig) -> ParticleSet:
    observations = np.asarray(observations, dtype=np.float64)
    if observations.size == 0:
        raise ValueError("empty observation batch")
    if not np.all(np.isfinite(observations)):
        raise ValueError("observations must be finite")
    preds = q_eval(ps.particles, obs, actions)
    ll = log_likelihoods(preds, observations, cfg.obs_sigma)
    return ParticleSet(ps.particles, reweight(ps.weights, ll), ps.resampled)


def ess(ps_or_weights) -> float:
    w = getattr(ps_or_weights, "weights", ps_or_weights)
    w = np.asarray(w, dtype=np.float64)
    return float(1.0 / np.dot(w, w))


def systematic_indices(weights, u: float) -> np.ndarray:
    """Offspring parent indices for a given offset ``u`` in [0, 1).

    Strata sit at ``(u + k) / N``; the comparison is done in units of 1/N.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    edges = np.cumsum(w) * n
    edges[-1] = n  # guard against round-off leaving the last stratum unmatched
    # u + (n - 1) can round up to n when u is just below 1; keep every point inside
    points = np.minimum(u + np.arange(n), np.nextafter(float(n), 0.0))
    return np.searchsorted(edges, points, side="right")


def systematic_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    _check_normalized(ps.weights)
    idx = systematic_indices(ps.weights, rng.random())
    n = ps.size
    return ParticleSet(ps.particles[idx].copy(), np.full(n, 1.0 / n), ps.resampled + 1)


def maybe_resample(ps: ParticleSet, cfg: PFConfig, rng: np.random.Generator) -> ParticleSet:
    # draw unconditionally to keep the stream aligned whether or not we resample
    u = rng.random()
    if ess(ps) >= cfg.threshold:
        return ps
    _check_normalized(ps.weights)
    idx = systematic_indices(ps.weights, u)
    n = ps.size
    return ParticleSet(ps.particles[idx].copy(), np.full(n, 1.0 / n), ps.resampled + 1)


def estimate(ps: ParticleSet) -> np.ndarray:
    """Weighted posterior mean, summed in particle-index order."""
    _check_normalized(ps.weights)
    return ps.weights @ ps.particles


def filter_step(ps: ParticleSet, obs, actions, observations, q_eval: QEval,
                cfg: PFConfig, rng: np.random.Generator) -> tuple[ParticleSet, np.ndarray]:
    """Predict, reweight, resample if ESS is low; return the set and its mean."""
    ps = predict(ps, cfg, rng)
    ps = update_weights(ps, obs, actions, observations, q_eval, cfg)
    ps = maybe_resample(ps, cfg, rng)
    return ps, estimate(ps)


def shift(ps: ParticleSet, delta) -> ParticleSet:
    return replace(ps, particles=ps.particles + np.asarray(delta)[None, :])


def inject(ps: ParticleSet, theta) -> ParticleSet:
    """Replace the lowest-weight particle by ``theta`` with weight 1/N."""
    k = int(np.argmin(ps.weights))
    particles = ps.particles.copy()
    particles[k] = theta
    w = ps.weights.copy()
    w[k] = 1.0 / ps.size
    return ParticleSet(particles, w / w.sum(), ps.resampled)
