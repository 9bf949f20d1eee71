"""Double-DQN action selection, targets and updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuralnet import NetworkParams, flatten, forward, loss_and_grad, sgd_step
from .replay import Batch


@dataclass
class AgentNets:
    online: NetworkParams
    target: NetworkParams

    @classmethod
    def from_online(cls, online: NetworkParams) -> "AgentNets":
        return cls(online, online.copy())


@dataclass(frozen=True)
class EpsilonSchedule:
    initial: float = 1.0
    decay: float = 0.9995
    floor: float = 0.001

    def __call__(self, episode: int) -> float:
        return max(self.floor, self.initial * self.decay ** episode)


def select_action(nets: AgentNets, obs, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(nets.online.spec.n_out))
    # np.argmax returns the first maximum, i.e. the lowest action index
    return int(np.argmax(forward(nets.online, obs)))


def greedy_action(nets: AgentNets, obs) -> int:
    return int(np.argmax(forward(nets.online, obs)))


def compute_targets(nets: AgentNets, batch: Batch, gamma: float,
                    rule: str = "double") -> np.ndarray:
    """TD targets; ``rule`` is "double" (online argmax, target value) or "max"."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    q_next_target = forward(nets.target, batch.next_obs)
    if rule == "double":
        best = np.argmax(forward(nets.online, batch.next_obs), axis=1)
        bootstrap = q_next_target[np.arange(len(best)), best]
    elif rule == "max":
        bootstrap = q_next_target.max(axis=1)
    else:
        raise ValueError(f"unknown target rule {rule!r}")
    return np.where(batch.dones, rewards, rewards + gamma * bootstrap)


def train_step(nets: AgentNets, batch: Batch, gamma: float, lr: float,
               rule: str = "double", targets=None) -> tuple[AgentNets, float, np.ndarray]:
    """One SGD step on the online net.

    Returns the updated nets, the pre-update loss, and the targets used.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if targets is None:
        targets = compute_targets(nets, batch, gamma, rule)
    loss, grad = loss_and_grad(nets.online, batch.obs, batch.actions, targets)
    return AgentNets(sgd_step(nets.online, grad, lr), nets.target), loss, targets


def sync_target(nets: AgentNets) -> AgentNets:
    return AgentNets(nets.online, nets.online.copy())


def nets_equal(a: NetworkParams, b: NetworkParams) -> bool:
    return np.array_equal(flatten(a), flatten(b))
