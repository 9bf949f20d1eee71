"""Deterministic multi-agent grid environment.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; row 0 is
the first line of a map file, so "north" means decreasing ``y``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np


class MalformedMap(ValueError):
    pass


class SteppedTerminalState(RuntimeError):
    pass


class Position(NamedTuple):
    x: int
    y: int


class Action(enum.IntEnum):
    N = 0
    S = 1
    E = 2
    W = 3
    NE = 4
    SE = 5
    NW = 6
    SW = 7
    STAY = 8


NUM_ACTIONS = len(Action)

# unit displacement per action, indexed by the action encoding
OFFSETS = (
    (0, -1),
    (0, 1),
    (1, 0),
    (-1, 0),
    (1, -1),
    (1, 1),
    (-1, -1),
    (-1, 1),
    (0, 0),
)

OBS_SIZE = 14

MOVE_PENALTY = -4.0
PROGRESS_REWARD = 5.0
TARGET_REWARD = 200.0
COLLISION_PENALTY = -20.0


class Cause(str, enum.Enum):
    RUNNING = "Running"
    ALL_REACHED = "AllReached"
    OBSTACLE_COLLISION = "ObstacleCollision"
    AGENT_COLLISION = "AgentCollision"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    obstacles: np.ndarray  # bool, shape (height, width)
    starts: tuple[Position, ...]
    targets: tuple[Position, ...]
    cell_size_m: float = 2.0

    @property
    def num_agents(self) -> int:
        return len(self.starts)

    def in_bounds(self, p: Sequence[int]) -> bool:
        return 0 <= p[0] < self.width and 0 <= p[1] < self.height

    def is_free(self, p: Sequence[int]) -> bool:
        return self.in_bounds(p) and not self.obstacles[p[1], p[0]]

    def default_max_steps(self) -> int:
        return 100 if max(self.width, self.height) <= 12 else 300

    def to_text(self) -> str:
        rows = [["#" if self.obstacles[y, x] else "." for x in range(self.width)]
                for y in range(self.height)]
        for t in self.targets:
            rows[t.y][t.x] = "T"
        for s in self.starts:
            rows[s.y][s.x] = "S"
        return "\n".join("".join(r) for r in rows) + "\n"


@dataclass(frozen=True)
class WorldState:
    positions: tuple[Position, ...]
    reached: tuple[bool, ...]
    step: int = 0


@dataclass(frozen=True)
class AgentEvents:
    moved: bool = False
    closer: bool = False
    farther: bool = False
    hit_obstacle: bool = False
    hit_agent: int = 0  # number of colliding pairs this agent is part of
    reached_target: bool = False
    active: bool = True

    def reward(self) -> float:
        """Reward implied by the event flags alone."""
        if not self.active:
            return 0.0
        r = 0.0
        if self.moved:
            r += MOVE_PENALTY
        if self.closer:
            r += PROGRESS_REWARD
        elif self.farther:
            r -= PROGRESS_REWARD
        if self.reached_target:
            r += TARGET_REWARD
        if self.hit_obstacle:
            r += COLLISION_PENALTY
        r += COLLISION_PENALTY * self.hit_agent
        return r


@dataclass(frozen=True)
class StepOutcome:
    rewards: tuple[float, ...]
    terminal: bool
    cause: Cause
    events: tuple[AgentEvents, ...] = field(default=())

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


def parse_map(text: str, cell_size_m: float = 2.0) -> GridMap:
    lines = text.splitlines()
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedMap("empty map")
    width = len(lines[0])
    if width == 0:
        raise MalformedMap("empty first row")
    height = len(lines)
    obstacles = np.zeros((height, width), dtype=bool)
    starts: list[Position] = []
    targets: list[Position] = []
    for y, line in enumerate(lines):
        if len(line) != width:
            raise MalformedMap(f"row {y} has length {len(line)}, expected {width}")
        for x, ch in enumerate(line):
            if ch == "#":
                obstacles[y, x] = True
            elif ch == "S":
                starts.append(Position(x, y))
            elif ch == "T":
                targets.append(Position(x, y))
            elif ch != ".":
                raise MalformedMap(f"unknown glyph {ch!r} at ({x}, {y})")
    if width * height < 2:
        raise MalformedMap("map needs at least two cells")
    if not starts:
        raise MalformedMap("no start cell")
    if not targets:
        raise MalformedMap("no target cell")
    if len(targets) == 1 and len(starts) > 1:
        targets = targets * len(starts)
    if len(targets) != len(starts):
        raise MalformedMap(f"{len(starts)} starts but {len(targets)} targets")
    return GridMap(width, height, obstacles, tuple(starts), tuple(targets), cell_size_m)


def load_map(path) -> GridMap:
    with open(path, encoding="utf-8") as fh:
        return parse_map(fh.read())


def reset(grid: GridMap) -> WorldState:
    return WorldState(tuple(grid.starts), (False,) * grid.num_agents, 0)


def _dist(a: Sequence[int], b: Sequence[int]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def distance_sum(grid: GridMap, state: WorldState) -> float:
    """Sum of Euclidean distances (cells) from active agents to their targets."""
    return sum(
        _dist(p, t)
        for p, t, done in zip(state.positions, grid.targets, state.reached)
        if not done
    )


def _conflicting_pairs(moving, start, proposed):
    pairs = set()
    for a in range(len(moving)):
        for b in range(a + 1, len(moving)):
            i, j = moving[a], moving[b]
            if proposed[i] == proposed[j]:
                pairs.add((i, j))
            elif (proposed[i] == start[j] and proposed[j] == start[i]
                  and proposed[i] != start[i]):
                pairs.add((i, j))
    return pairs


def step(grid: GridMap, state: WorldState, actions: Sequence[int],
         max_steps: int) -> tuple[WorldState, StepOutcome]:
    m = grid.num_agents
    if len(actions) != m:
        raise ValueError(f"expected {m} actions, got {len(actions)}")
    if all(state.reached) or state.step >= max_steps:
        raise SteppedTerminalState("episode already finished")

    active = [i for i in range(m) if not state.reached[i]]
    start = list(state.positions)
    proposed = list(start)
    hit_obstacle = [False] * m
    for i in active:
        dx, dy = OFFSETS[int(actions[i])]
        cell = Position(start[i].x + dx, start[i].y + dy)
        if grid.is_free(cell):
            proposed[i] = cell
        else:
            hit_obstacle[i] = True

    # Reverting a colliding pair can create a new conflict with a third agent,
    # so resolve until no two active agents share or swap cells.
    hit_agent = [0] * m
    seen: set[tuple[int, int]] = set()
    while True:
        pairs = _conflicting_pairs(active, start, proposed) - seen
        if not pairs:
            break
        for i, j in pairs:
            hit_agent[i] += 1
            hit_agent[j] += 1
            proposed[i] = start[i]
            proposed[j] = start[j]
        seen |= pairs

    before = sum(_dist(start[i], grid.targets[i]) for i in active)
    reached = list(state.reached)
    for i in active:
        if proposed[i] == grid.targets[i]:
            reached[i] = True
    after = sum(_dist(proposed[i], grid.targets[i]) for i in active if not reached[i])
    closer = after < before
    farther = after > before

    events = []
    for i in range(m):
        if state.reached[i]:
            events.append(AgentEvents(active=False))
            continue
        events.append(AgentEvents(
            moved=proposed[i] != start[i],
            closer=closer,
            farther=farther,
            hit_obstacle=hit_obstacle[i],
            hit_agent=hit_agent[i],
            reached_target=reached[i],
        ))
    rewards = tuple(e.reward() for e in events)

    n = state.step + 1
    if any(hit_obstacle):
        cause = Cause.OBSTACLE_COLLISION
    elif any(hit_agent):
        cause = Cause.AGENT_COLLISION
    elif all(reached):
        cause = Cause.ALL_REACHED
    elif n >= max_steps:
        cause = Cause.TIMEOUT
    else:
        cause = Cause.RUNNING
    new_state = WorldState(tuple(proposed), tuple(reached), n)
    return new_state, StepOutcome(rewards, cause is not Cause.RUNNING, cause, tuple(events))


def observe(grid: GridMap, state: WorldState, agent: int) -> np.ndarray:
    """14-dim feature vector for one agent.

    Layout: own position (2), offset to target (2), neighbor occupancy in
    action order N..SW (8), offset to the nearest other active agent (2).
    Positions and offsets are divided by the map width/height.
    """
    w, h = grid.width, grid.height
    p = state.positions[agent]
    t = grid.targets[agent]
    others = [state.positions[j] for j in range(grid.num_agents)
              if j != agent and not state.reached[j]]
    occupied = set(others)
    obs = np.zeros(OBS_SIZE)
    obs[0] = p.x / w
    obs[1] = p.y / h
    obs[2] = (t.x - p.x) / w
    obs[3] = (t.y - p.y) / h
    for k in range(8):
        dx, dy = OFFSETS[k]
        cell = (p.x + dx, p.y + dy)
        if not grid.is_free(cell) or cell in occupied:
            obs[4 + k] = 1.0
    if others:
        nearest = min(others, key=lambda q: _dist(p, q))
        obs[12] = (nearest.x - p.x) / w
        obs[13] = (nearest.y - p.y) / h
    return obs


def with_positions(state: WorldState, positions) -> WorldState:
    return replace(state, positions=tuple(Position(*p) for p in positions))
