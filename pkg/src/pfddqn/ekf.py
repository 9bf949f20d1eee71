"""Extended Kalman filter on a random-walk weight vector.

The transition is the identity, so prediction only inflates the covariance.
Measurements are scalar Q-values processed one at a time, relinearizing the
network around the current estimate before each one.  ``P`` is a 2-D array
in full mode and a 1-D array of variances in diagonal mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuralnet import LayerSpec, q_and_grad_flat

# A full d x d covariance costs O(d^2) per scalar measurement; beyond this size
# (the default 1833-weight network included) "auto" falls back to diagonal.
FULL_MODE_MAX_DIM = 1000


class NonPositiveInnovationVariance(FloatingPointError):
    pass


@dataclass(frozen=True)
class EKFConfig:
    p0: float = 1e-2
    q_proc: float = 1e-6
    r_obs: float = 1.0
    mode: str = "auto"  # "full", "diagonal" or "auto"

    def resolve_mode(self, dim: int) -> str:
        if self.mode == "auto":
            return "full" if dim <= FULL_MODE_MAX_DIM else "diagonal"
        if self.mode not in ("full", "diagonal"):
            raise ValueError(f"unknown EKF mode {self.mode!r}")
        return self.mode


@dataclass
class EKFState:
    theta_hat: np.ndarray
    P: np.ndarray
    q_proc: float
    r_obs: float

    @property
    def diagonal(self) -> bool:
        return self.P.ndim == 1

    @classmethod
    def initial(cls, theta0, cfg: EKFConfig) -> "EKFState":
        theta0 = np.array(theta0, dtype=np.float64)
        d = theta0.size
        if cfg.resolve_mode(d) == "full":
            P = cfg.p0 * np.eye(d)
        else:
            P = np.full(d, cfg.p0)
        return cls(theta0, P, cfg.q_proc, cfg.r_obs)

    def trace(self) -> float:
        return float(self.P.sum() if self.diagonal else np.trace(self.P))


def ekf_predict(state: EKFState) -> EKFState:
    if state.diagonal:
        P = state.P + state.q_proc
    else:
        P = state.P.copy()
        P[np.diag_indices_from(P)] += state.q_proc
    return EKFState(state.theta_hat.copy(), P, state.q_proc, state.r_obs)


def _update_inplace(theta, P, z, h_val, H, r_obs):
    if P.ndim == 1:
        PH = P * H
    else:
        PH = P @ H
    S = float(H @ PH) + r_obs
    if not S > 0.0:
        raise NonPositiveInnovationVariance(f"S = {S}")
    K = PH / S
    theta += K * (z - h_val)
    if P.ndim == 1:
        P -= K * PH
    else:
        # (I - K H) P == P - K (P H)^T for symmetric P
        P -= np.outer(K, PH)
        P += P.T
        P *= 0.5


def ekf_update_scalar(state: EKFState, z: float, h_val: float, H) -> EKFState:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != state.theta_hat.shape:
        raise ValueError(f"H has shape {H.shape}, expected {state.theta_hat.shape}")
    theta = state.theta_hat.copy()
    P = state.P.copy()
    _update_inplace(theta, P, float(z), float(h_val), H, state.r_obs)
    return EKFState(theta, P, state.q_proc, state.r_obs)


def ekf_batch_update(state: EKFState, obs, actions, observations, spec: LayerSpec) -> EKFState:
    """One predict, then sequential scalar updates over the batch in order."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    observations = np.asarray(observations, dtype=np.float64).reshape(-1)
    if not len(obs) == len(actions) == len(observations) > 0:
        raise ValueError("batch components must be non-empty and of equal length")
    state = ekf_predict(state)
    theta, P = state.theta_hat, state.P
    H = np.empty_like(theta)
    for x, a, z in zip(obs, actions, observations):
        h_val, H = q_and_grad_flat(spec, theta, x, int(a), out=H)
        _update_inplace(theta, P, float(z), h_val, H, state.r_obs)
    return state


def kf_oracle(steps, q: float, r: float, P0, theta0):
    """Reference linear Kalman filter.

    ``steps`` is a sequence; each item is a list of ``(z, H)`` scalar
    measurements taken after one random-walk prediction.  All measurements of
    a step are applied jointly (stacked H, joint gain via a linear solve,
    Joseph-form covariance), which is independent of the sequential path used
    by the filter under test.  Returns ``[(theta, P), ...]`` after each step.
    """
    theta = np.array(theta0, dtype=np.float64).reshape(-1)
    d = theta.size
    P = np.array(P0, dtype=np.float64)
    if P.ndim == 0:
        P = P * np.eye(d)
    elif P.ndim == 1:
        P = np.diag(P)
    out = []
    for meas in steps:
        P = P + q * np.eye(d)
        if len(meas):
            z = np.array([m[0] for m in meas], dtype=np.float64)
            H = np.array([np.asarray(m[1], dtype=np.float64).reshape(d) for m in meas])
            R = r * np.eye(len(z))
            S = H @ P @ H.T + R
            K = np.linalg.solve(S, H @ P).T
            theta = theta + K @ (z - H @ theta)
            A = np.eye(d) - K @ H
            P = A @ P @ A.T + K @ R @ K.T
        out.append((theta.copy(), P.copy()))
    return out
