from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class Batch(NamedTuple):
    """Column-stacked transitions."""
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)

    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[i], int(self.actions[i]), float(self.rewards[i]),
                           self.next_obs[i], bool(self.dones[i]))
                for i in range(len(self.actions))]

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        items = list(items)
        return cls(
            np.array([t.obs for t in items], dtype=np.float64),
            np.array([t.action for t in items], dtype=np.int64),
            np.array([t.reward for t in items], dtype=np.float64),
            np.array([t.next_obs for t in items], dtype=np.float64),
            np.array([t.done for t in items], dtype=bool),
        )


class ReplayBuffer:
    """Ring buffer of transitions with FIFO eviction."""

    def __init__(self, capacity: int, obs_size: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_size = obs_size
        self._obs = np.zeros((capacity, obs_size))
        self._next = np.zeros((capacity, obs_size))
        self._act = np.zeros(capacity, dtype=np.int64)
        self._rew = np.zeros(capacity)
        self._done = np.zeros(capacity, dtype=bool)
        self._head = 0  # slot for the next push
        self.count = 0

    def __len__(self):
        return self.count

    def push(self, t: Transition) -> None:
        i = self._head
        self._obs[i] = t.obs
        self._next[i] = t.next_obs
        self._act[i] = t.action
        self._rew[i] = t.reward
        self._done[i] = t.done
        self._head = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def _gather(self, idx) -> Batch:
        return Batch(self._obs[idx], self._act[idx], self._rew[idx],
                     self._next[idx], self._done[idx])

    def stored(self) -> Batch:
        """All transitions, oldest first."""
        if self.count < self.capacity:
            idx = np.arange(self.count)
        else:
            idx = (np.arange(self.capacity) + self._head) % self.capacity
        return self._gather(idx)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement."""
        if self.count < batch_size:
            raise InsufficientSamples(f"{self.count} stored, {batch_size} requested")
        return self._gather(self.sample_indices(batch_size, rng))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.count, size=batch_size)
