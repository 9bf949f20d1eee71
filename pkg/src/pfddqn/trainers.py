"""Training loops for DDQN, PF-DDQN and EKF-DDQN plus greedy evaluation.

All agents share one online network.  Every run owns four independent
random streams derived from its seed (network init, action selection, replay
sampling, filter noise), so the filter variants never perturb the random
sequence seen by the underlying DDQN loop.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ekf as ekf_mod
from . import pf as pf_mod
from .ddqn import AgentNets, EpsilonSchedule, sync_target, train_step
from .gridworld import (NUM_ACTIONS, OBS_SIZE, Action, Cause, GridMap, Position,
                        observe, reset, step)
from .neuralnet import (LayerSpec, NetworkParams, flatten, forward, forward_many,
                        init_network, unflatten)
from .pathmetrics import arrival_tick, bfs_shortest, move_count, path_length
from .replay import Batch, ReplayBuffer, Transition

ALGORITHMS = ("ddqn", "pf-ddqn", "ekf-ddqn")


@dataclass(frozen=True)
class TrainConfig:
    memory_size: int = 10000
    batch_size: int = 500
    gamma: float = 0.95
    learning_rate: float = 1e-4
    target_sync_every: int = 50
    eps_initial: float = 1.0
    eps_decay: float = 0.9995
    eps_floor: float = 0.001
    episodes: int = 1000
    max_steps: Optional[int] = None  # None: map-size default
    train_every: int = 1
    filter_every: int = 1
    learn_start: Optional[int] = None  # None: batch_size
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)
    target_rule: str = "double"
    solution_window: int = 500
    solution_threshold: float = 0.9
    timing: bool = True

    def __post_init__(self):
        for name in ("memory_size", "batch_size", "target_sync_every", "episodes",
                     "train_every", "filter_every", "solution_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.eps_floor <= self.eps_initial <= 1.0:
            raise ValueError("need 0 <= eps_floor <= eps_initial <= 1")
        if not 0.0 < self.eps_decay <= 1.0:
            raise ValueError("eps_decay must lie in (0, 1]")
        if self.target_rule not in ("double", "max"):
            raise ValueError(f"unknown target rule {self.target_rule!r}")
        if self.memory_size < self.batch_size:
            raise ValueError("memory_size must be at least batch_size")

    @property
    def start_training_at(self) -> int:
        return self.batch_size if self.learn_start is None else max(self.learn_start, self.batch_size)

    def layer_spec(self) -> LayerSpec:
        return LayerSpec((OBS_SIZE, *self.hidden, NUM_ACTIONS))

    def schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_initial, self.eps_decay, self.eps_floor)

    def steps_for(self, grid: GridMap) -> int:
        return self.max_steps if self.max_steps is not None else grid.default_max_steps()


@dataclass(frozen=True)
class PFDDQNConfig:
    pf: pf_mod.PFConfig = field(default_factory=pf_mod.PFConfig)
    coupling: str = "shift"  # "shift", "inject" or "none"

    def __post_init__(self):
        if self.coupling not in ("shift", "inject", "none"):
            raise ValueError(f"unknown coupling {self.coupling!r}")


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    total_reward: float
    steps: int
    outcome: str
    reached: tuple[bool, ...]
    epsilon: float
    wall_ms: float


@dataclass
class GreedyResult:
    paths: list[list[Position]]
    success: bool
    cause: str


@dataclass
class RunSummary:
    algorithm: str
    episodes: int
    target_hits: int
    obstacle_hits: int
    agent_collisions: int
    timeouts: int
    solution_episode: Optional[int]
    agent_solution_episodes: list[Optional[int]]
    final_success: bool
    final_path_moves: list[Optional[int]]
    final_path_lengths: list[float]
    bfs_lengths: list[Optional[int]]
    train_steps: int
    wall_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    summary: RunSummary
    records: list[EpisodeRecord]
    nets: AgentNets
    greedy: GreedyResult
    # flat online weights after each of the first ``trace_steps`` train steps
    trace: list[np.ndarray] = field(default_factory=list)
    filter_state: object = None


def solution_episode(successes, window: int, threshold: float) -> Optional[int]:
    """First episode whose trailing full window has success rate >= threshold."""
    s = np.asarray(successes, dtype=np.float64)
    if s.size < window:
        return None
    csum = np.concatenate([[0.0], np.cumsum(s)])
    rates = (csum[window:] - csum[:-window]) / window
    hits = np.nonzero(rates >= threshold - 1e-12)[0]
    return int(hits[0] + window - 1) if hits.size else None


def trailing_success(records, window: int = 100) -> float:
    tail = records[-window:]
    return sum(r.outcome == Cause.ALL_REACHED.value for r in tail) / len(tail)


class PFCorrector:
    """Particle-filter correction applied after each SGD step.

    With ``coupling="shift"`` the SGD displacement acts as the control input
    of the random-walk model, moving every particle by the same amount before
    the noisy prediction; at zero noise the filter then reproduces SGD.
    ``"inject"`` instead replaces the lowest-weight particle by the SGD
    weights, and ``"none"`` ignores SGD entirely.
    """

    def __init__(self, spec: LayerSpec, theta0, cfg: PFDDQNConfig, rng):
        self.spec = spec
        self.cfg = cfg
        self.rng = rng
        self.particles = pf_mod.init_particles(theta0, cfg.pf, rng)
        self.last = np.array(theta0, dtype=np.float64)

    def _q_eval(self, thetas, obs, actions):
        q = forward_many(self.spec, thetas, obs)
        return q[:, np.arange(len(actions)), actions]

    def __call__(self, online: NetworkParams, batch: Batch, targets) -> NetworkParams:
        theta_sgd = flatten(online)
        ps = self.particles
        if self.cfg.coupling == "shift":
            ps = pf_mod.shift(ps, theta_sgd - self.last)
        elif self.cfg.coupling == "inject":
            ps = pf_mod.inject(ps, theta_sgd)
        ps, est = pf_mod.filter_step(ps, batch.obs, batch.actions, targets,
                                     self._q_eval, self.cfg.pf, self.rng)
        self.particles = ps
        self.last = est
        return unflatten(self.spec, est)


class EKFCorrector:
    """EKF correction re-seeded from the SGD weights; covariance persists."""

    def __init__(self, spec: LayerSpec, theta0, cfg: ekf_mod.EKFConfig):
        self.spec = spec
        self.state = ekf_mod.EKFState.initial(theta0, cfg)

    def __call__(self, online: NetworkParams, batch: Batch, targets) -> NetworkParams:
        self.state.theta_hat = flatten(online)
        self.state = ekf_mod.ekf_batch_update(self.state, batch.obs, batch.actions,
                                              targets, self.spec)
        return unflatten(self.spec, self.state.theta_hat)


Corrector = Callable[[NetworkParams, Batch, np.ndarray], NetworkParams]


def _streams(seed: int):
    return (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]),
            np.random.default_rng([seed, 3]))


def _observe_all(grid, state):
    return [observe(grid, state, i) for i in range(grid.num_agents)]


def _run(algorithm: str, grid: GridMap, cfg: TrainConfig, make_corrector,
         trace_steps: int = 0, progress: Optional[Callable[[EpisodeRecord], None]] = None
         ) -> RunResult:
    t_start = time.perf_counter()
    spec = cfg.layer_spec()
    act_rng, replay_rng, filter_rng = _streams(cfg.seed)
    nets = AgentNets.from_online(init_network(spec, cfg.seed))
    corrector: Optional[Corrector] = make_corrector(spec, flatten(nets.online), filter_rng)
    buffer = ReplayBuffer(cfg.memory_size, OBS_SIZE)
    schedule = cfg.schedule()
    max_steps = cfg.steps_for(grid)
    m = grid.num_agents

    records: list[EpisodeRecord] = []
    trace: list[np.ndarray] = []
    env_steps = 0
    train_steps = 0
    for ep in range(cfg.episodes):
        t0 = time.perf_counter()
        eps = schedule(ep)
        state = reset(grid)
        obs = _observe_all(grid, state)
        total = 0.0
        while True:
            q = forward(nets.online, np.array(obs))
            actions = [int(Action.STAY)] * m
            for i in range(m):
                if state.reached[i]:
                    continue
                if act_rng.random() < eps:
                    actions[i] = int(act_rng.integers(NUM_ACTIONS))
                else:
                    actions[i] = int(np.argmax(q[i]))
            new_state, out = step(grid, state, actions, max_steps)
            next_obs = _observe_all(grid, new_state)
            for i in range(m):
                if state.reached[i]:
                    continue
                done = out.terminal or new_state.reached[i]
                buffer.push(Transition(obs[i], actions[i], out.rewards[i], next_obs[i], done))
            total += out.total_reward
            env_steps += 1

            if buffer.count >= cfg.start_training_at and env_steps % cfg.train_every == 0:
                batch = buffer.sample(cfg.batch_size, replay_rng)
                nets, _, targets = train_step(nets, batch, cfg.gamma, cfg.learning_rate,
                                              cfg.target_rule)
                train_steps += 1
                if corrector is not None and train_steps % cfg.filter_every == 0:
                    nets = AgentNets(corrector(nets.online, batch, targets), nets.target)
                if train_steps % cfg.target_sync_every == 0:
                    nets = sync_target(nets)
                if len(trace) < trace_steps:
                    trace.append(flatten(nets.online))

            state, obs = new_state, next_obs
            if out.terminal:
                break
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.timing else 0.0
        rec = EpisodeRecord(ep, total, state.step, out.cause.value, state.reached, eps, wall)
        records.append(rec)
        if progress is not None:
            progress(rec)

    greedy = evaluate_greedy(nets, grid, max_steps)
    summary = _summarize(algorithm, grid, cfg, records, greedy, train_steps,
                         time.perf_counter() - t_start)
    return RunResult(summary, records, nets, greedy, trace, corrector)


def _summarize(algorithm, grid, cfg, records, greedy, train_steps, wall):
    causes = [r.outcome for r in records]
    succ = [c == Cause.ALL_REACHED.value for c in causes]
    per_agent = [
        solution_episode([r.reached[i] for r in records], cfg.solution_window,
                         cfg.solution_threshold)
        for i in range(grid.num_agents)
    ]
    moves, lengths = [], []
    for i, p in enumerate(greedy.paths):
        t = arrival_tick(p, grid.targets[i])
        moves.append(None if t is None else move_count(p[: t + 1]))
        lengths.append(path_length(p))
    return RunSummary(
        algorithm=algorithm,
        episodes=len(records),
        target_hits=causes.count(Cause.ALL_REACHED.value),
        obstacle_hits=causes.count(Cause.OBSTACLE_COLLISION.value),
        agent_collisions=causes.count(Cause.AGENT_COLLISION.value),
        timeouts=causes.count(Cause.TIMEOUT.value),
        solution_episode=solution_episode(succ, cfg.solution_window, cfg.solution_threshold),
        agent_solution_episodes=per_agent,
        final_success=greedy.success,
        final_path_moves=moves,
        final_path_lengths=lengths,
        bfs_lengths=[bfs_shortest(grid, s, t) for s, t in zip(grid.starts, grid.targets)],
        train_steps=train_steps,
        wall_seconds=wall if cfg.timing else 0.0,
    )


def run_ddqn(grid: GridMap, cfg: TrainConfig, **kw) -> RunResult:
    return _run("ddqn", grid, cfg, lambda spec, theta0, rng: None, **kw)


def run_pf_ddqn(grid: GridMap, cfg: TrainConfig, pf_cfg: Optional[PFDDQNConfig] = None,
                **kw) -> RunResult:
    pf_cfg = pf_cfg or PFDDQNConfig()
    return _run("pf-ddqn", grid, cfg,
                lambda spec, theta0, rng: PFCorrector(spec, theta0, pf_cfg, rng), **kw)


def run_ekf_ddqn(grid: GridMap, cfg: TrainConfig,
                 ekf_cfg: Optional[ekf_mod.EKFConfig] = None, **kw) -> RunResult:
    ekf_cfg = ekf_cfg or ekf_mod.EKFConfig()
    return _run("ekf-ddqn", grid, cfg,
                lambda spec, theta0, rng: EKFCorrector(spec, theta0, ekf_cfg), **kw)


def run(algorithm: str, grid: GridMap, cfg: TrainConfig, pf_cfg=None, ekf_cfg=None,
        **kw) -> RunResult:
    if algorithm == "ddqn":
        return run_ddqn(grid, cfg, **kw)
    if algorithm == "pf-ddqn":
        return run_pf_ddqn(grid, cfg, pf_cfg, **kw)
    if algorithm == "ekf-ddqn":
        return run_ekf_ddqn(grid, cfg, ekf_cfg, **kw)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def evaluate_greedy(nets: AgentNets, grid: GridMap, max_steps: int) -> GreedyResult:
    """Roll out the online network with epsilon = 0."""
    state = reset(grid)
    paths = [[p] for p in state.positions]
    while True:
        q = forward(nets.online, np.array(_observe_all(grid, state)))
        actions = [int(Action.STAY) if state.reached[i] else int(np.argmax(q[i]))
                   for i in range(grid.num_agents)]
        state, out = step(grid, state, actions, max_steps)
        for path, p in zip(paths, state.positions):
            path.append(p)
        if out.terminal:
            return GreedyResult(paths, out.cause is Cause.ALL_REACHED, out.cause.value)
