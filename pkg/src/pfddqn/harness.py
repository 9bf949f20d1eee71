"""Command-line front end: config parsing, seed sweeps, artifact files, comparison.

A run directory holds one ``seed_<S>/`` subdirectory per seed, each with
exactly four files: ``metrics.csv``, ``curve.csv``, ``summary.json`` and
``paths.json``.  ``summary.json`` embeds the final online network so that
``eval`` can replay the greedy policy without a separate checkpoint file.

Config values come from three layers.  Built-in defaults are overridden by
an optional preset, then by a flat JSON config file whose keys mirror the
long flag names (``"eps-decay"`` or ``"eps_decay"``), then by flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import bundled_map
from .ddqn import AgentNets
from .ekf import EKFConfig
from .gridworld import GridMap, load_map
from .neuralnet import checkpoint_dict, from_checkpoint_dict, load_checkpoint
from .pathmetrics import PathConstraints, bfs_shortest, check_constraints
from .pf import PFConfig
from .trainers import ALGORITHMS, PFDDQNConfig, RunResult, TrainConfig, evaluate_greedy, run

METRICS_HEADER = ("episode", "total_reward", "steps", "outcome", "epsilon", "wall_ms")
CURVE_HEADER = ("episode", "trailing_mean_reward")
ARTIFACTS = ("metrics.csv", "curve.csv", "summary.json", "paths.json")
CURVE_WINDOW = 500
SUMMARY_SCHEMA = 1


class UsageError(ValueError):
    """Bad command line or config file; ``token`` is the offending input."""

    def __init__(self, message: str, token: Optional[str] = None):
        super().__init__(message)
        self.token = token


class MissingRun(FileNotFoundError):
    pass


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(text)
    return v


def _seed_list(text) -> tuple[int, ...]:
    if isinstance(text, int):
        return (text,)
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    seeds = tuple(int(s) for s in str(text).split(",") if s.strip())
    if not seeds:
        raise ValueError(text)
    return seeds


def _hidden(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    return tuple(int(s) for s in str(text).split(","))


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


@dataclass(frozen=True)
class Option:
    """One train setting: its flag, value parser, and where it lands."""

    name: str
    parse: Callable[[Any], Any]
    target: str  # "run", "train", "pf", "ekf" or "coupling"
    attr: str
    help: str = ""
    choices: Optional[tuple] = None


OPTIONS = (
    Option("algorithm", str, "run", "algorithm", "trainer to run", ALGORITHMS),
    Option("map", str, "run", "map_path", "map file or bundled map name"),
    Option("seed", _seed_list, "run", "seeds", "seed or comma-separated seeds"),
    Option("out", str, "run", "out_dir", "output directory"),
    Option("jobs", _positive_int, "run", "jobs", "parallel seed workers"),
    Option("episodes", _positive_int, "train", "episodes"),
    Option("gamma", float, "train", "gamma"),
    Option("lr", float, "train", "learning_rate"),
    Option("batch", _positive_int, "train", "batch_size"),
    Option("memory", _positive_int, "train", "memory_size"),
    Option("sync", _positive_int, "train", "target_sync_every"),
    Option("eps-initial", float, "train", "eps_initial"),
    Option("eps-decay", float, "train", "eps_decay"),
    Option("eps-floor", float, "train", "eps_floor"),
    Option("max-steps", _positive_int, "train", "max_steps"),
    Option("train-every", _positive_int, "train", "train_every"),
    Option("filter-every", _positive_int, "train", "filter_every"),
    Option("learn-start", int, "train", "learn_start"),
    Option("hidden", _hidden, "train", "hidden", "hidden layer widths, e.g. 32,32"),
    Option("target-rule", str, "train", "target_rule", "TD target estimator", ("double", "max")),
    Option("timing", _flag, "train", "timing", "record wall-clock times (false gives reproducible bytes)"),
    Option("particles", _positive_int, "pf", "num_particles"),
    Option("proc-sigma", float, "pf", "process_sigma"),
    Option("obs-sigma", float, "pf", "obs_sigma"),
    Option("init-sigma", float, "pf", "init_sigma"),
    Option("ess-threshold", float, "pf", "ess_threshold"),
    Option("coupling", str, "coupling", "coupling", "how SGD weights enter the particle set",
           ("shift", "inject", "none")),
    Option("ekf-r", float, "ekf", "r_obs"),
    Option("ekf-q", float, "ekf", "q_proc"),
    Option("ekf-p0", float, "ekf", "p0"),
    Option("ekf-mode", str, "ekf", "mode", "covariance form", ("auto", "full", "diagonal")),
)
OPTION_BY_KEY = {o.name.replace("-", "_"): o for o in OPTIONS}

RUN_DEFAULTS = {"algorithm": "ddqn", "map": "trivial_3x3.map"}

# Named starting points; flags and config files still override them.
PRESETS: dict[str, dict[str, Any]] = {
    "trivial": {"map": "trivial_3x3.map", "episodes": 2000, "batch": 64, "eps_decay": 0.995},
    "small": {"map": "small_10x10.map", "episodes": 5000, "batch": 64, "eps_decay": 0.995},
    "exp1": {"map": "exp1_30x30.map", "episodes": 60000},
    "exp2": {"map": "exp2_30x30_10agv.map", "episodes": 60000},
}


@dataclass(frozen=True)
class RunSpec:
    algorithm: str
    map_path: str
    train: TrainConfig = field(default_factory=TrainConfig)
    pf: PFDDQNConfig = field(default_factory=PFDDQNConfig)
    ekf: EKFConfig = field(default_factory=EKFConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    jobs: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {self.algorithm!r}", self.algorithm)
        if not self.seeds:
            raise UsageError("at least one seed is required", "--seed")
        if not os.path.isfile(self.map_path):
            raise UsageError(f"map file not found: {self.map_path}", self.map_path)

    def config_echo(self) -> dict:
        """Every effective setting, keyed by flag name, for summary.json."""
        echo = {"algorithm": self.algorithm, "map": self.map_path}
        sections = {"train": self.train, "pf": self.pf.pf, "ekf": self.ekf, "coupling": self.pf}
        for opt in OPTIONS:
            if opt.target in sections:
                value = getattr(sections[opt.target], opt.attr)
                echo[opt.name.replace("-", "_")] = list(value) if isinstance(value, tuple) else value
        return echo


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        m = re.search(r"invalid (?:choice|\w+ value): '([^']*)'", message)
        if m is None:
            m = re.search(r"unrecognized arguments: (\S+)", message)
        if m is None:
            m = re.search(r"argument (\S+)", message)
        raise UsageError(message, m.group(1) if m else None)

    def exit(self, status=0, message=None):
        if status:
            raise UsageError(message or "usage error")
        super().exit(status, message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of settings")
    p.add_argument("--preset", choices=sorted(PRESETS))
    for opt in OPTIONS:
        kwargs = {"dest": opt.name.replace("-", "_"), "default": None, "help": opt.help or None}
        if opt.choices:
            kwargs["choices"] = opt.choices
        kwargs["type"] = str if opt.parse is _flag else opt.parse
        p.add_argument(f"--{opt.name}", **kwargs)
    p.add_argument("--no-timing", dest="timing", action="store_const", const=False,
                   help="write 0 for wall times so metrics files are byte-reproducible")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfddqn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_train_flags(sub.add_parser("train", help="train one algorithm over one or more seeds"))
    ev = sub.add_parser("eval", help="greedy rollout of a saved network")
    ev.add_argument("--checkpoint", required=True, help="checkpoint or summary.json file")
    ev.add_argument("--map", required=True)
    ev.add_argument("--max-steps", type=_positive_int, default=None)
    cmp_ = sub.add_parser("compare", help="tabulate finished runs")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--json", action="store_true", help="print the report as JSON")
    return p


def resolve_map(name: str) -> str:
    """A path as given if it exists, otherwise a bundled map of that name."""
    if os.path.isfile(name):
        return name
    bundled = bundled_map(os.path.basename(name))
    return bundled if os.path.isfile(bundled) else name


def _coerce(key: str, value, source: str):
    norm = key.replace("-", "_")
    opt = OPTION_BY_KEY.get(norm)
    if opt is None:
        raise UsageError(f"unknown {source} key {key!r}", key)
    try:
        parsed = opt.parse(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value {value!r} for {key}", str(value)) from None
    if opt.choices and parsed not in opt.choices:
        raise UsageError(f"{key} must be one of {opt.choices}, got {parsed!r}", str(parsed))
    return norm, parsed


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}", str(path)) from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object", str(path))
    return dict(_coerce(k, v, "config") for k, v in data.items())


def spec_from_values(values: dict) -> RunSpec:
    """Build a RunSpec from a flat ``{key: parsed value}`` mapping."""
    values = {**RUN_DEFAULTS, **values}
    groups: dict[str, dict] = {"run": {}, "train": {}, "pf": {}, "ekf": {}, "coupling": {}}
    for key, value in values.items():
        opt = OPTION_BY_KEY[key]
        groups[opt.target][opt.attr] = value
    run_kw = groups["run"]
    run_kw["map_path"] = resolve_map(run_kw["map_path"])
    try:
        train = TrainConfig(**groups["train"])
        pf = PFDDQNConfig(PFConfig(**groups["pf"]), **groups["coupling"])
        ekf = EKFConfig(**groups["ekf"])
        ekf.resolve_mode(1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RunSpec(train=train, pf=pf, ekf=ekf, **run_kw)


def parse_run_spec(argv: Sequence[str], config=None) -> RunSpec:
    """Parse ``train`` flags (without the subcommand word) into a RunSpec.

    ``config`` may be a path or an already-loaded mapping; a ``--config``
    flag takes its place.  Precedence: flag > config > preset > defaults.
    """
    parser = _Parser(prog="pfddqn train")
    _add_train_flags(parser)
    ns = parser.parse_args(list(argv))
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("config", "preset")}
    if ns.config is not None:
        config = ns.config
    if config is None:
        file_values = {}
    elif isinstance(config, dict):
        file_values = dict(_coerce(k, v, "config") for k, v in config.items())
    else:
        file_values = read_config_file(config)
    values: dict = {}
    if ns.preset is not None:
        values.update(_coerce(k, v, "preset") for k, v in PRESETS[ns.preset].items())
    values.update(file_values)
    values.update(dict(_coerce(k, v, "flag") for k, v in flags.items()))
    return spec_from_values(values)


# ---------------------------------------------------------------- artifacts


def _fmt(x: float) -> str:
    return repr(float(x))


def trailing_means(values: Sequence[float], window: int = CURVE_WINDOW) -> list[float]:
    """Mean of the last ``window`` values at each index (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    return [float(np.mean(v[max(0, e - window + 1): e + 1])) for e in range(len(v))]


def write_metrics(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.episode, _fmt(r.total_reward), r.steps, r.outcome, _fmt(r.epsilon),
                        f"{r.wall_ms:.3f}"])


def write_curve(path, records, window: int = CURVE_WINDOW) -> None:
    means = trailing_means([r.total_reward for r in records], window)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r, m in zip(records, means):
            w.writerow([r.episode, _fmt(m)])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _paths_report(result: RunResult, grid: GridMap) -> dict:
    paths = result.greedy.paths
    # greedy rollouts record every agent at every tick, so the paths are aligned
    violations = [v.to_dict() for v in check_constraints(paths, grid, PathConstraints())]
    return {
        "success": result.greedy.success,
        "cause": result.greedy.cause,
        "paths": [[[p.x, p.y] for p in path] for path in paths],
        "violations": violations,
    }


def _write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, allow_nan=False)
        fh.write("\n")


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def run_seed(spec: RunSpec, seed: int, progress=None) -> Path:
    """Train one seed and write its four artifact files."""
    grid = load_map(spec.map_path)
    cfg = replace(spec.train, seed=seed)
    result = run(spec.algorithm, grid, cfg, pf_cfg=spec.pf, ekf_cfg=spec.ekf, progress=progress)
    out = seed_dir(spec.out_dir, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", result.records)
    write_curve(out / "curve.csv", result.records)
    _write_json(out / "summary.json", {
        "schema": SUMMARY_SCHEMA,
        "algorithm": spec.algorithm,
        "seed": seed,
        "map": os.path.basename(spec.map_path),
        "config": spec.config_echo(),
        "summary": result.summary.to_dict(),
        "checkpoint": checkpoint_dict(result.nets.online),
    })
    _write_json(out / "paths.json", _paths_report(result, grid))
    return out


def _run_seed_job(args):
    spec, seed = args
    return run_seed(spec, seed)


def run_experiment(spec: RunSpec, progress=None) -> list[Path]:
    """Train every seed of ``spec``; returns the per-seed output directories."""
    Path(spec.out_dir).mkdir(parents=True, exist_ok=True)
    if spec.jobs > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            return list(pool.map(_run_seed_job, [(spec, s) for s in spec.seeds]))
    return [run_seed(spec, s, progress) for s in spec.seeds]


def load_summary(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    missing = {"schema", "algorithm", "seed", "map", "config", "summary", "checkpoint"} - set(data)
    if missing:
        raise ValueError(f"{path}: summary missing keys {sorted(missing)}")
    return data


# ---------------------------------------------------------------- compare


def _find_summaries(dirs) -> list[Path]:
    found = []
    for d in dirs:
        d = Path(d)
        if (d / "summary.json").is_file():
            found.append(d / "summary.json")
            continue
        here = sorted(d.glob("seed_*/summary.json")) if d.is_dir() else []
        if not here:
            raise MissingRun(f"no finished run under {d}")
        found.extend(here)
    return found


def _median(xs):
    return float(np.median(xs)) if xs else None


def pair_score(filter_sol: Optional[int], ddqn_sol: Optional[int]) -> float:
    """1 if the filter variant solved earlier, 0.5 on a tie; unsolved counts as never."""
    a = math.inf if filter_sol is None else filter_sol
    b = math.inf if ddqn_sol is None else ddqn_sol
    return 1.0 if a < b else 0.5 if a == b else 0.0


def compare(dirs: Sequence) -> dict:
    """Per-algorithm statistics and paired-seed win rates against DDQN."""
    runs = [load_summary(p) for p in _find_summaries(dirs)]
    if len(runs) < 2:
        raise MissingRun("comparison needs at least two finished runs")
    maps = sorted({r["map"] for r in runs})
    if len(maps) > 1:
        raise ValueError(f"runs use different maps: {maps}")

    by_alg: dict[str, list[dict]] = {}
    for r in runs:
        by_alg.setdefault(r["algorithm"], []).append(r)
    table = {}
    for alg in sorted(by_alg):
        rs = by_alg[alg]
        sols = [r["summary"]["solution_episode"] for r in rs]
        solved = [s for s in sols if s is not None]
        ratios = []
        for r in rs:
            s = r["summary"]
            for moves, bfs in zip(s["final_path_moves"], s["bfs_lengths"]):
                if moves is not None and bfs:
                    ratios.append(moves / bfs)
        table[alg] = {
            "runs": len(rs),
            "seeds": sorted(r["seed"] for r in rs),
            "solution_median": _median(solved),
            "solution_min": min(solved) if solved else None,
            "solution_max": max(solved) if solved else None,
            "unsolved": len(sols) - len(solved),
            "target_hits": sum(r["summary"]["target_hits"] for r in rs),
            "obstacle_hits": sum(r["summary"]["obstacle_hits"] for r in rs),
            "agent_collisions": sum(r["summary"]["agent_collisions"] for r in rs),
            "timeouts": sum(r["summary"]["timeouts"] for r in rs),
            "path_bfs_ratio_mean": float(np.mean(ratios)) if ratios else None,
            "path_bfs_ratios": ratios,
            "wall_seconds_mean": float(np.mean([r["summary"]["wall_seconds"] for r in rs])),
        }

    wins = {}
    base = by_alg.get("ddqn", [])
    for alg in sorted(by_alg):
        if alg == "ddqn" or not base:
            continue
        scores = []
        for seed in sorted({r["seed"] for r in by_alg[alg]} & {r["seed"] for r in base}):
            for a in (r for r in by_alg[alg] if r["seed"] == seed):
                for b in (r for r in base if r["seed"] == seed):
                    scores.append(pair_score(a["summary"]["solution_episode"],
                                             b["summary"]["solution_episode"]))
        wins[alg] = {"pairs": len(scores), "wins": float(sum(scores)),
                     "win_rate": float(np.mean(scores)) if scores else None}
    return {"map": maps[0], "algorithms": table, "vs_ddqn": wins}


def _cell(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return f"{v:.3g}" if not v.is_integer() else str(int(v))
    return str(v)


def format_report(report: dict) -> str:
    cols = ("runs", "solution_median", "solution_min", "solution_max", "unsolved",
            "target_hits", "obstacle_hits", "agent_collisions", "timeouts",
            "path_bfs_ratio_mean", "wall_seconds_mean")
    heads = ("runs", "sol_med", "sol_min", "sol_max", "unsolved", "targets", "obstacles",
             "collisions", "timeouts", "path/bfs", "wall_s")
    rows = [("algorithm", *heads)]
    for alg, stats in report["algorithms"].items():
        rows.append((alg, *(_cell(stats[c]) for c in cols)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"map: {report['map']}"]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    for alg, w in report["vs_ddqn"].items():
        lines.append(f"{alg} vs ddqn: {_cell(w['wins'])}/{w['pairs']} paired seeds won, "
                     f"win rate {_cell(w['win_rate'])}")
    return "\n".join(lines)


# ---------------------------------------------------------------- eval / main


def load_network(path):
    """Online network from a checkpoint file or from a run's summary.json."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "checkpoint" in data:
        return from_checkpoint_dict(data["checkpoint"])
    return load_checkpoint(path)


def evaluate_checkpoint(checkpoint, map_path, max_steps=None) -> dict:
    grid = load_map(resolve_map(map_path))
    params = load_network(checkpoint)
    steps = max_steps or grid.default_max_steps()
    greedy = evaluate_greedy(AgentNets.from_online(params), grid, steps)
    paths = [[[p.x, p.y] for p in path] for path in greedy.paths]
    return {
        "success": greedy.success,
        "cause": greedy.cause,
        "paths": paths,
        "bfs_lengths": [bfs_shortest(grid, s, t) for s, t in zip(grid.starts, grid.targets)],
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        if ns.command == "train":
            spec = parse_run_spec(argv[argv.index("train") + 1:])
            for out in run_experiment(spec):
                s = load_summary(out / "summary.json")["summary"]
                print(f"{out}: solution_episode={_cell(s['solution_episode'])} "
                      f"targets={s['target_hits']}/{s['episodes']} "
                      f"greedy_success={s['final_success']}")
        elif ns.command == "eval":
            print(json.dumps(evaluate_checkpoint(ns.checkpoint, ns.map, ns.max_steps)))
        else:
            report = compare(ns.dirs)
            print(json.dumps(report, indent=1) if ns.json else format_report(report))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (MissingRun, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
