"""Path length, yaw angles, feasibility checks and a BFS oracle."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .gridworld import OFFSETS, GridMap, Position


class MisalignedPaths(ValueError):
    pass


Path = Sequence[Position]


@dataclass(frozen=True)
class PathConstraints:
    length_min: float = 0.0
    length_max: float = math.inf
    yaw_min: float = 0.0
    yaw_max: float = 180.0

    def __post_init__(self):
        if self.length_min > self.length_max or self.yaw_min > self.yaw_max:
            raise ValueError("constraint bounds are inverted")


@dataclass(frozen=True)
class Violation:
    path_index: int  # -1 for whole-fleet violations
    kind: str  # length | yaw | obstacle | collision | arrival
    tick: Optional[int]
    detail: str

    def to_dict(self) -> dict:
        return asdict(self)


def path_length(path: Path) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:]))


def move_count(path: Path) -> int:
    return sum(1 for a, b in zip(path, path[1:]) if tuple(a) != tuple(b))


def total_objective(paths: Sequence[Path]) -> float:
    return sum(path_length(p) for p in paths)


def yaw_angles(path: Path) -> list[float]:
    """Turn angle in degrees between consecutive non-zero segments."""
    segs = [(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:])]
    segs = [s for s in segs if s != (0, 0)]
    angles = []
    for (ux, uy), (vx, vy) in zip(segs, segs[1:]):
        # atan2 keeps multiples of 45 degrees exact, where acos of a dot product drifts
        angles.append(math.degrees(math.atan2(abs(ux * vy - uy * vx), ux * vx + uy * vy)))
    return angles


def arrival_tick(path: Path, target) -> Optional[int]:
    """First tick from which the path sits on ``target`` for good."""
    target = tuple(target)
    if not path or tuple(path[-1]) != target:
        return None
    k = len(path) - 1
    while k > 0 and tuple(path[k - 1]) == target:
        k -= 1
    return k


def _align(paths, targets):
    horizon = max(len(p) for p in paths)
    aligned = []
    for i, p in enumerate(paths):
        p = [tuple(q) for q in p]
        if len(p) < horizon:
            if not p or p[-1] != tuple(targets[i]):
                raise MisalignedPaths(
                    f"path {i} has {len(p)} ticks of {horizon} and does not end on its target")
            p = p + [p[-1]] * (horizon - len(p))
        aligned.append(p)
    return aligned


def check_constraints(paths: Sequence[Path], grid: GridMap,
                      constraints: PathConstraints | Sequence[PathConstraints]) -> list[Violation]:
    """All constraint violations; an empty list means the path set is feasible.

    Agents that have arrived are ignored for mutual collisions afterwards,
    matching the simulator where arrived agents leave the board.
    """
    if isinstance(constraints, PathConstraints):
        constraints = [constraints] * len(paths)
    if len(constraints) != len(paths):
        raise ValueError("one constraint set per path required")
    if not paths:
        return []
    targets = grid.targets
    aligned = _align(paths, targets)
    horizon = len(aligned[0])
    out: list[Violation] = []

    for i, (p, c) in enumerate(zip(aligned, constraints)):
        length = path_length(p)
        if not c.length_min <= length <= c.length_max:
            out.append(Violation(i, "length", None,
                                 f"length {length:.6g} outside [{c.length_min:g}, {c.length_max:g}]"))
        for k, ang in enumerate(yaw_angles(p)):
            if not c.yaw_min <= ang <= c.yaw_max:
                out.append(Violation(i, "yaw", k,
                                     f"yaw {ang:.6g} outside [{c.yaw_min:g}, {c.yaw_max:g}]"))
        for k, q in enumerate(p):
            if not grid.is_free(q):
                out.append(Violation(i, "obstacle", k, f"waypoint {q} is blocked"))

    arrivals = [arrival_tick(p, targets[i]) for i, p in enumerate(aligned)]
    last = [horizon - 1 if a is None else a for a in arrivals]
    for i in range(len(aligned)):
        for j in range(i + 1, len(aligned)):
            pi, pj = aligned[i], aligned[j]
            for k in range(min(last[i], last[j]) + 1):
                if pi[k] == pj[k]:
                    out.append(Violation(i, "collision", k, f"agents {i} and {j} share {pi[k]}"))
                if k + 1 <= min(last[i], last[j]) and pi[k] == pj[k + 1] and pj[k] == pi[k + 1] \
                        and pi[k] != pi[k + 1]:
                    out.append(Violation(i, "collision", k, f"agents {i} and {j} swap cells"))

    if any(a is None for a in arrivals):
        missing = [i for i, a in enumerate(arrivals) if a is None]
        out.append(Violation(-1, "arrival", None, f"agents {missing} never arrive"))
    elif len(set(arrivals)) > 1:
        spread = max(arrivals) - min(arrivals)
        out.append(Violation(-1, "arrival", max(arrivals), f"arrival spread {spread} ticks"))
    return out


def arrival_spread(paths: Sequence[Path], grid: GridMap) -> Optional[int]:
    ticks = [arrival_tick(p, grid.targets[i]) for i, p in enumerate(paths)]
    if any(t is None for t in ticks):
        return None
    return max(ticks) - min(ticks)


def bfs_shortest(grid: GridMap, start, goal) -> Optional[int]:
    """Fewest 8-connected moves from start to goal, or None if unreachable."""
    start, goal = Position(*start), Position(*goal)
    if not grid.is_free(start) or not grid.is_free(goal):
        return None
    dist = np.full((grid.height, grid.width), -1, dtype=np.int64)
    dist[start.y, start.x] = 0
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        if (x, y) == goal:
            return int(dist[y, x])
        for dx, dy in OFFSETS[:8]:
            nx, ny = x + dx, y + dy
            if grid.is_free((nx, ny)) and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                queue.append(Position(nx, ny))
    return None
