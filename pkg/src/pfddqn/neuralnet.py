"""Dense ReLU Q-network with hand-written backpropagation.

Parameters are kept as a list of ``(W, b)`` pairs with ``W`` shaped
``(n_in, n_out)``, so a batch ``X`` of shape ``(B, n_in)`` maps to
``X @ W + b``.  The canonical flat layout is layer 0 weights (row-major),
layer 0 biases, layer 1 weights, and so on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DEFAULT_SIZES = (14, 32, 32, 9)


class ShapeMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    sizes: tuple[int, ...] = DEFAULT_SIZES

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def slices(self):
        """Yield ``(w_slice, w_shape, b_slice)`` per layer into the flat vector."""
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(off, off + a * b)
            off += a * b
            bs = slice(off, off + b)
            off += b
            yield w, (a, b), bs


@dataclass
class NetworkParams:
    spec: LayerSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])


def init_network(spec: LayerSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for a, b in zip(spec.sizes[:-1], spec.sizes[1:]):
        bound = math.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    return NetworkParams(spec, weights, biases)


def flatten(params: NetworkParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts).astype(np.float64, copy=False)


def unflatten(spec: LayerSpec, vector) -> NetworkParams:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size != spec.num_params:
        raise LengthMismatch(f"expected {spec.num_params} values, got shape {v.shape}")
    weights, biases = [], []
    for ws, shape, bs in spec.slices():
        weights.append(v[ws].reshape(shape).copy())
        biases.append(v[bs].copy())
    return NetworkParams(spec, weights, biases)


def _as_batch(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.spec.n_in or x.ndim > 2:
        raise ShapeMismatch(f"input shape {x.shape} does not fit {params.spec.sizes}")
    return np.atleast_2d(x)


def _forward_cache(params: NetworkParams, X: np.ndarray):
    acts = [X]
    pre = []
    h = X
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(params: NetworkParams, x) -> np.ndarray:
    """Q-values for one input vector, or for each row of a 2-D batch."""
    single = np.ndim(x) == 1
    X = _as_batch(params, x)
    h = X
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k != last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def forward_many(spec: LayerSpec, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate N flat parameter vectors on one batch: returns (N, B, n_out)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    X = np.asarray(X, dtype=np.float64)
    if thetas.shape[1] != spec.num_params:
        raise LengthMismatch(f"expected {spec.num_params} columns, got {thetas.shape[1]}")
    n = thetas.shape[0]
    layers = list(spec.slices())
    h = None
    for k, (ws, (a, b), bs) in enumerate(layers):
        w = thetas[:, ws].reshape(n, a, b)
        if h is None:
            # shared input: one GEMM against all particles' first layers side by side
            z = (X @ w.transpose(1, 0, 2).reshape(a, n * b)).reshape(len(X), n, b)
            h = z.transpose(1, 0, 2) + thetas[:, None, bs]
        else:
            h = np.matmul(h, w) + thetas[:, None, bs]
        if k != len(layers) - 1:
            np.maximum(h, 0.0, out=h)
    return h


def _backward(params: NetworkParams, acts, pre, delta: np.ndarray) -> np.ndarray:
    """Backpropagate ``delta`` = dL/d(output) into a flat gradient."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            # ReLU subgradient at exactly zero is taken as 0
            delta = (delta @ params.weights[k].T) * (pre[k - 1] > 0.0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def _check_actions(params, actions, n):
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.size != n:
        raise ShapeMismatch(f"{actions.size} actions for {n} inputs")
    if actions.size and (actions.min() < 0 or actions.max() >= params.spec.n_out):
        raise ShapeMismatch("action index out of range")
    return actions


def loss_and_grad(params: NetworkParams, inputs, actions, targets):
    """Return ``(L, dL/dθ)`` for L = ½ Σ (Q(s_i, a_i) − y_i)²."""
    X = _as_batch(params, inputs)
    if X.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    actions = _check_actions(params, actions, X.shape[0])
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if y.size != X.shape[0]:
        raise ShapeMismatch(f"{y.size} targets for {X.shape[0]} inputs")
    acts, pre = _forward_cache(params, X)
    rows = np.arange(X.shape[0])
    resid = acts[-1][rows, actions] - y
    delta = np.zeros_like(acts[-1])
    delta[rows, actions] = resid
    return 0.5 * float(resid @ resid), _backward(params, acts, pre, delta)


def grad_loss(params: NetworkParams, inputs, actions, targets) -> np.ndarray:
    return loss_and_grad(params, inputs, actions, targets)[1]


def grad_q_theta(params: NetworkParams, x, action: int) -> np.ndarray:
    """Gradient of the scalar Q(x, action; θ) with respect to the flat θ."""
    X = _as_batch(params, x)
    if X.shape[0] != 1:
        raise ShapeMismatch("grad_q_theta takes a single input")
    _check_actions(params, [action], 1)
    acts, pre = _forward_cache(params, X)
    delta = np.zeros_like(acts[-1])
    delta[0, action] = 1.0
    return _backward(params, acts, pre, delta)


def q_and_grad(params: NetworkParams, x, action: int) -> tuple[float, np.ndarray]:
    X = _as_batch(params, x)
    acts, pre = _forward_cache(params, X)
    delta = np.zeros_like(acts[-1])
    delta[0, action] = 1.0
    return float(acts[-1][0, action]), _backward(params, acts, pre, delta)


def q_and_grad_flat(spec: LayerSpec, theta: np.ndarray, x, action: int,
                    out: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """``q_and_grad`` on a flat weight vector, for one input.

    Works on views of ``theta`` and writes the gradient into ``out`` when given,
    which keeps the per-sample cost of sequential filter updates low.
    """
    slices = list(spec.slices())
    layers = [(theta[ws].reshape(shape), theta[bs]) for ws, shape, bs in slices]
    acts = [np.asarray(x, dtype=np.float64)]
    for k, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        acts.append(z if k == len(layers) - 1 else np.maximum(z, 0.0))
    g = np.zeros(spec.num_params) if out is None else out
    # output layer: dQ_a/dz is the unit vector e_a
    ws, shape, bs = slices[-1]
    g[ws] = 0.0
    g[bs] = 0.0
    g[ws].reshape(shape)[:, action] = acts[-2]
    g[bs][action] = 1.0
    delta = layers[-1][0][:, action] * (acts[-2] > 0.0)
    for k in range(len(layers) - 2, -1, -1):
        ws, shape, bs = slices[k]
        np.multiply.outer(acts[k], delta, out=g[ws].reshape(shape))
        g[bs] = delta
        if k > 0:
            # ReLU subgradient at exactly zero is taken as 0
            delta = (layers[k][0] @ delta) * (acts[k] > 0.0)
    return float(acts[-1][action]), g


def sgd_step(params: NetworkParams, gradient, lr: float) -> NetworkParams:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != (params.spec.num_params,):
        raise ShapeMismatch(f"gradient shape {g.shape}, expected ({params.spec.num_params},)")
    return unflatten(params.spec, flatten(params) - lr * g)


def save_checkpoint(params: NetworkParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(params), fh)


def checkpoint_dict(params: NetworkParams) -> dict:
    # json writes floats with repr(), which round-trips float64 exactly
    return {"sizes": list(params.spec.sizes), "params": flatten(params).tolist()}


def from_checkpoint_dict(data: dict) -> NetworkParams:
    return unflatten(LayerSpec(tuple(data["sizes"])), data["params"])


def load_checkpoint(path) -> NetworkParams:
    with open(path, encoding="utf-8") as fh:
        return from_checkpoint_dict(json.load(fh))


def param_count(sizes: Sequence[int]) -> int:
    return LayerSpec(tuple(sizes)).num_params
