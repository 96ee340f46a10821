"""Experiment orchestration CLI.

Subcommands cover the full pipeline: world generation, oracle dataset
building, navigation training, auxiliary training, evaluation, report
emission, and inference benchmarking. Every artifact records the hash of
the experiment configuration that produced it, and commands refuse to mix
artifacts from different configurations.

Exit codes: 0 success, 2 configuration error, 3 missing/mismatched
dependency artifact, 4 path-length constraint gate failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import distill, pathoracle, worldsim
from .auxtrain import (ConstraintConfig, CurriculumController, EpisodeStep,
                       EpisodeLog, RewardWeights, TD3Config, compute_eta,
                       format_percent, run_episode, train_auxiliary)
from .errors import ConfigError, ConstraintViolation, DependencyError, LoadError
from .pathoracle import TaskSampler, build_graph, partition_regions
from .slimnet import MLPSpec, SlimMask, SlimmableMLP, active_params, load_weights, save_weights
from .worldsim import OBS_WIDTH, REACHED, SensorConfig, VoxelGrid

# artifact file names, relative to the output directory
CONFIG_FILE = "config.json"
WORLD_FILE = "world.txt"
PATHS_FILES = {"train": "train_paths.txt", "validation": "val_paths.txt",
               "test": "test_paths.txt"}
DATA_FILES = {"train": "train_data.bin", "validation": "val_data.bin",
              "test": "test_data.bin"}
NAV_WEIGHTS_FILE = "nav_weights.bin"
NAV_TRAIN_FILE = "nav_train.csv"
AUX_ACTOR_FILE = "aux_actor.bin"
AUX_CRITIC_FILES = ("aux_critic1.bin", "aux_critic2.bin")
AUX_EPISODES_FILE = "aux_episodes.csv"
AUX_UPDATES_FILE = "aux_updates.csv"
AUX_EVAL_FILE = "aux_eval.csv"
GATE_FILE = "gate.txt"
EVAL_SUCCESS_FILE = "eval_success.csv"
EVAL_RMSE_FILE = "eval_rmse.csv"
EVAL_EPISODES_FILE = "eval_episodes.csv"
BENCH_FILE = "bench.csv"
REPORT_FILES = {
    "success": "report_success.csv",
    "rmse": "report_rmse.csv",
    "heatmap": "report_heatmap.csv",
    "depth_bins": "report_depth_bins.csv",
    "summary": "report_summary.csv",
    "timing": "report_timing.csv",
}

EPISODE_COLUMNS = ("episode_id,t,x,y,z,rho,p_f,p_d,reward,m_active,"
                   "fwd_depth,outcome,opt_steps")


# configuration tree


@dataclass
class WorldSection:
    dims: tuple = (64, 64, 8)
    resolution: float = 1.0
    density: float = 0.1
    seed: int = 7
    vertical_locked: bool = True
    flight_z: int = 2
    goal_radius: float = 2.0
    max_step: float = 2.0


@dataclass
class SensorSection:
    p_f: int = 3
    p_d: int = 3
    max_range: float = 100.0
    fifo_depth: int = 4


@dataclass
class OracleSection:
    seed: int = 0
    region_fractions: tuple = (0.5, 0.25, 0.25)
    n_train_paths: int = 1600
    n_val_paths: int = 60
    n_test_paths: int = 60
    distances: tuple = (5, 10, 15, 20, 25, 30, 35, 40, 45)
    sample_tolerance: float = 0.3
    label_jitter: float = 0.3
    clearance_weight: float = 0.5
    crowd_boost: int = 3


@dataclass
class NavSection:
    hidden: tuple = (128, 128)
    output_scale: float = 2.0
    rho_min: float = 0.25
    n_random_rhos: int = 2
    n_random_powers: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 150
    patience: int = 20
    seed: int = 0
    refine_rollouts: int = 900


@dataclass
class AuxSection:
    actor_hidden: tuple = (32, 32)
    critic_hidden: tuple = (64, 64)
    seed: int = 0
    total_env_steps: int = 30_000
    eval_every_episodes: int = 20
    eval_episodes: int = 10
    gate_episodes: int = 20
    gate_distance: float | None = 20.0
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    exploration_steps: int = 2000
    action_noise_std: float = 0.1
    target_noise_std: float = 0.2
    target_noise_clip: float = 0.5
    batch_size: int = 128
    buffer_capacity: int = 100_000
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    max_episode_steps: int = 200


@dataclass
class RewardSection:
    collision: float = 10.0
    goal: float = 10.0
    progress: float = 1.0
    time: float = 0.1
    compute: float = 0.1
    sensing: float = 0.05


@dataclass
class CurriculumSection:
    start: float = 10.0
    increment: float = 10.0
    maximum: float = 40.0
    threshold: float = 0.8


@dataclass
class ConstraintSection:
    alpha: float = 0.5
    beta: float = 1.5


@dataclass
class EvalSection:
    seed: int = 123
    buckets: tuple = (10, 20, 30, 40)
    episodes_per_bucket: int = 60
    rho_grid: tuple = (0.25, 0.5, 0.75, 1.0)
    adapt_episodes: int = 60
    adapt_distance: float = 20.0
    heatmap_bin: int = 8
    depth_bin_width: float = 0.1
    sample_tolerance: float = 0.2


@dataclass
class BenchSection:
    seed: int = 0
    sizes: tuple = ((32,), (64, 64), (128, 128), (256, 256))
    aux_hidden: tuple = (32, 32)
    n_observations: int = 200
    repeats: int = 5


@dataclass
class ExperimentConfig:
    mode: str = "C"
    out_dir: str = "runs/exp"
    world: WorldSection = field(default_factory=WorldSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    nav: NavSection = field(default_factory=NavSection)
    aux: AuxSection = field(default_factory=AuxSection)
    reward: RewardSection = field(default_factory=RewardSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    constraint: ConstraintSection = field(default_factory=ConstraintSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # construction / serialization

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key, val in data.items():
            if key not in sections:
                raise ConfigError(f"unknown config section or key {key!r}")
            if key in ("mode", "out_dir"):
                setattr(cfg, key, val)
                continue
            section = getattr(cfg, key)
            names = {f.name for f in dataclasses.fields(section)}
            if not isinstance(val, dict):
                raise ConfigError(f"section {key!r} must be a table of keys")
            for k, v in val.items():
                if k not in names:
                    raise ConfigError(f"unknown key {key}.{k}")
                if isinstance(v, list):
                    v = _as_tuple(v)
                setattr(section, k, v)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out: dict = {"mode": self.mode, "out_dir": self.out_dir}
        for f in dataclasses.fields(self):
            if f.name in ("mode", "out_dir"):
                continue
            sec = getattr(self, f.name)
            out[f.name] = {g.name: _plain(getattr(sec, g.name))
                           for g in dataclasses.fields(sec)}
        return out

    def config_hash(self) -> str:
        """Hash of every semantic field (out_dir excluded, so the same
        experiment written to two directories shares artifacts)."""
        data = self.to_dict()
        data.pop("out_dir")
        text = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.mode not in ("C", "S"):
            raise ConfigError(f"mode must be 'C' or 'S', got {self.mode!r}")
        w = self.world
        if len(w.dims) != 3 or any(int(d) != d or d < 1 for d in w.dims):
            raise ConfigError(f"world.dims must be 3 positive ints, got {w.dims}")
        if not 0.0 <= w.density < 1.0:
            raise ConfigError(f"world.density must be in [0, 1), got {w.density}")
        if w.resolution <= 0:
            raise ConfigError(f"world.resolution must be positive, got {w.resolution}")
        if not 0 <= w.flight_z < w.dims[2]:
            raise ConfigError(f"world.flight_z {w.flight_z} outside [0, {w.dims[2]})")
        if w.goal_radius <= 0 or w.max_step <= 0:
            raise ConfigError("world.goal_radius and world.max_step must be positive")
        # sensor ranges are enforced by the sensor config itself
        self.sensor_config()
        if self.sensor.fifo_depth < 1:
            raise ConfigError(f"sensor.fifo_depth must be >= 1, got {self.sensor.fifo_depth}")
        o = self.oracle
        if len(o.region_fractions) != 3:
            raise ConfigError("oracle.region_fractions needs exactly 3 entries")
        if min(o.n_train_paths, o.n_val_paths, o.n_test_paths) < 1:
            raise ConfigError("oracle path counts must be positive")
        if not o.distances:
            raise ConfigError("oracle.distances must not be empty")
        if o.label_jitter < 0:
            raise ConfigError(f"oracle.label_jitter must be >= 0, got {o.label_jitter}")
        if int(o.crowd_boost) != o.crowd_boost or o.crowd_boost < 1:
            raise ConfigError(f"oracle.crowd_boost must be a positive integer, "
                              f"got {o.crowd_boost}")
        self.nav_spec()
        self.distill_config()
        self.td3_config()
        self.reward_weights()
        self.curriculum_controller()
        self.constraint_config()
        e = self.eval
        if not e.buckets or e.episodes_per_bucket < 1:
            raise ConfigError("eval.buckets must be non-empty with positive episodes")
        if e.heatmap_bin < 1 or e.depth_bin_width <= 0:
            raise ConfigError("eval.heatmap_bin and eval.depth_bin_width must be positive")
        b = self.bench
        if not b.sizes or b.n_observations < 1 or b.repeats < 1:
            raise ConfigError("bench needs sizes, observations, and repeats")

    # adapters to module-level configuration objects

    def sensor_config(self) -> SensorConfig:
        return SensorConfig(self.sensor.p_f, self.sensor.p_d, self.sensor.max_range)

    def nav_spec(self) -> MLPSpec:
        return MLPSpec(u=self.sensor.fifo_depth * OBS_WIDTH,
                       q=tuple(int(h) for h in self.nav.hidden), v=3,
                       output_activation="tanh",
                       output_scale=self.nav.output_scale)

    def distill_config(self) -> distill.DistillConfig:
        n = self.nav
        return distill.DistillConfig(
            rho_min=n.rho_min, n_random_rhos=n.n_random_rhos,
            n_random_powers=n.n_random_powers, batch_size=n.batch_size,
            lr=n.lr, max_epochs=n.max_epochs, patience=n.patience, seed=n.seed)

    def td3_config(self) -> TD3Config:
        a = self.aux
        return TD3Config(
            gamma=a.gamma, tau=a.tau, policy_delay=a.policy_delay,
            exploration_steps=a.exploration_steps,
            action_noise_std=a.action_noise_std,
            target_noise_std=a.target_noise_std,
            target_noise_clip=a.target_noise_clip, batch_size=a.batch_size,
            buffer_capacity=a.buffer_capacity, lr_actor=a.lr_actor,
            lr_critic=a.lr_critic, max_episode_steps=a.max_episode_steps)

    def reward_weights(self) -> RewardWeights:
        r = self.reward
        return RewardWeights(collision=r.collision, goal=r.goal,
                             progress=r.progress, time=r.time,
                             compute=r.compute, sensing=r.sensing)

    def curriculum_controller(self) -> CurriculumController:
        c = self.curriculum
        return CurriculumController(start=c.start, increment=c.increment,
                                    maximum=c.maximum, threshold=c.threshold)

    def constraint_config(self) -> ConstraintConfig:
        return ConstraintConfig(alpha=self.constraint.alpha,
                                beta=self.constraint.beta)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _as_tuple(v):
    return tuple(_as_tuple(x) if isinstance(x, list) else x for x in v)


def load_config(path: str | None, overrides) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        data.pop("hash", None)
    for item in overrides or []:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw  # bare strings need no quotes
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = val
    return ExperimentConfig.from_dict(data)


def write_config_copy(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    data = cfg.to_dict()
    data["hash"] = cfg.config_hash()
    with open(os.path.join(cfg.out_dir, CONFIG_FILE), "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


# artifact helpers


def _artifact(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _require(cfg: ExperimentConfig, name: str, producer: str) -> str:
    path = _artifact(cfg, name)
    if not os.path.exists(path):
        raise DependencyError(f"missing artifact {path}; run '{producer}' first")
    return path


def _check_hash(path: str, found: str, expected: str) -> None:
    if found != expected:
        raise DependencyError(
            f"{path} was built from config {found or '<none>'}, "
            f"current config is {expected}; regenerate it")


def write_csv(path: str, header: str, rows, config_hash: str) -> None:
    lines = [f"# config={config_hash}", header]
    lines.extend(rows)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_csv(path: str, expected_hash: str) -> tuple[list[str], list[list[str]]]:
    """Returns (header columns, rows) after validating the config hash."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith("# config="):
        raise LoadError(f"{path}: missing config header line")
    _check_hash(path, lines[0][len("# config="):], expected_hash)
    header = lines[1].split(",")
    rows = [ln.split(",") for ln in lines[2:] if ln]
    return header, rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


# subcommands


def cmd_gen_world(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    w = cfg.world
    grid = worldsim.generate_world(tuple(int(d) for d in w.dims),
                                   resolution=w.resolution,
                                   density=w.density, seed=w.seed)
    path = _artifact(cfg, WORLD_FILE)
    worldsim.save_world(grid, path, config_hash=cfg.config_hash())
    print(f"world {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]} "
          f"density {w.density} -> {path}")
    return 0


def _load_world(cfg: ExperimentConfig) -> VoxelGrid:
    path = _require(cfg, WORLD_FILE, "gen-world")
    grid, found = worldsim.load_world(path)
    _check_hash(path, found, cfg.config_hash())
    return grid


def _build_sampler(cfg: ExperimentConfig, grid: VoxelGrid) -> TaskSampler:
    graph = build_graph(grid, vertical_locked=cfg.world.vertical_locked)
    regions = partition_regions(grid, tuple(cfg.oracle.region_fractions))
    flight_z = cfg.world.flight_z if cfg.world.vertical_locked else None
    return TaskSampler(graph, regions, flight_z=flight_z)


def _sample_tasks(cfg: ExperimentConfig, sampler: TaskSampler, region: str,
                  n: int, rng) -> list:
    o = cfg.oracle
    tasks = []
    attempts = 0
    while len(tasks) < n and attempts < 4 * n:
        d = o.distances[attempts % len(o.distances)]
        attempts += 1
        try:
            tasks.append(sampler.sample(region, float(d), rng,
                                        tolerance=o.sample_tolerance))
        except ConfigError:
            continue
    if not tasks:
        raise ConfigError(f"could not sample any tasks in region {region!r}")
    return tasks


def _supervision_paths(cfg: ExperimentConfig, sampler: TaskSampler,
                       tasks) -> list:
    """Paths the datasets are labeled from: clearance-shaped re-plans of the
    sampled endpoints when shaping is on, the tasks' own shortest paths
    otherwise."""
    w = cfg.oracle.clearance_weight
    if w <= 0:
        return [t.path for t in tasks]
    return [pathoracle.astar(sampler.graph, t.spawn, t.goal, w)
            for t in tasks]


def cmd_oracle(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    grid = _load_world(cfg)
    sampler = _build_sampler(cfg, grid)
    o = cfg.oracle
    rng = np.random.default_rng(o.seed)
    sensor = cfg.sensor_config()
    counts = {"train": o.n_train_paths, "validation": o.n_val_paths,
              "test": o.n_test_paths}
    for region, n in counts.items():
        tasks = _sample_tasks(cfg, sampler, region, n, rng)
        paths = _supervision_paths(cfg, sampler, tasks)
        pathoracle.save_paths(paths, _artifact(cfg, PATHS_FILES[region]))
        # jitter and boosting shape the training distribution only; the
        # validation and test sets stay plain replays of the planned paths
        jitter = o.label_jitter if region == "train" else 0.0
        boost = o.crowd_boost if region == "train" else 1
        ds = pathoracle.label_dataset(grid, paths, depth=cfg.sensor.fifo_depth,
                                      max_step=cfg.world.max_step,
                                      sensor=sensor, jitter=jitter, rng=rng,
                                      crowd_boost=boost)
        pathoracle.save_dataset(ds, _artifact(cfg, DATA_FILES[region]),
                                config_hash=cfg.config_hash())
        print(f"{region}: {len(paths)} paths, {len(ds)} samples")
    return 0


def _load_dataset(cfg: ExperimentConfig, region: str, producer: str = "oracle"):
    path = _require(cfg, DATA_FILES[region], producer)
    ds, found = pathoracle.load_dataset(path)
    _check_hash(path, found, cfg.config_hash())
    return ds


def cmd_train_nav(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    train_ds = _load_dataset(cfg, "train")
    val_ds = _load_dataset(cfg, "validation")
    spec = cfg.nav_spec()
    layout = worldsim.ObservationLayout(cfg.sensor.fifo_depth)
    t0 = time.time()
    net, report = distill.train_navigation(train_ds, val_ds, spec,
                                           cfg.distill_config(),
                                           mode=cfg.mode, layout=layout)
    reports = [report]
    if cfg.nav.refine_rollouts > 0:
        # one round of on-policy relabeling: fly the freshly trained net,
        # label the states it actually visits, retrain on the union
        grid = _load_world(cfg)
        sampler = _build_sampler(cfg, grid)
        rng = np.random.default_rng(cfg.nav.seed + 31)
        tasks = _sample_tasks(cfg, sampler, "train",
                              cfg.nav.refine_rollouts, rng)
        rollout_ds = pathoracle.label_rollouts(
            grid, sampler.graph, tasks, net.forward,
            depth=cfg.sensor.fifo_depth, max_step=cfg.world.max_step,
            sensor=cfg.sensor_config(), goal_radius=cfg.world.goal_radius,
            clearance_weight=cfg.oracle.clearance_weight,
            crowd_boost=cfg.oracle.crowd_boost)
        union = pathoracle.merge_datasets(train_ds, rollout_ds)
        net, report = distill.train_navigation(union, val_ds, spec,
                                               cfg.distill_config(),
                                               mode=cfg.mode, layout=layout)
        reports.append(report)
    save_weights(net, _artifact(cfg, NAV_WEIGHTS_FILE),
                 config_hash=cfg.config_hash())
    rows = [f"{phase},{e},{_fmt(tr)},{_fmt(va)}"
            for phase, rep in enumerate(reports)
            for e, (tr, va) in enumerate(zip(rep.train_losses,
                                             rep.val_losses))]
    write_csv(_artifact(cfg, NAV_TRAIN_FILE),
              "phase,epoch,train_loss,val_loss", rows, cfg.config_hash())
    print(f"navigation trained: best epoch {report.best_epoch}, "
          f"val loss {report.val_losses[report.best_epoch - 1]:.6f}, "
          f"{time.time() - t0:.0f}s")
    return 0


def _load_nav(cfg: ExperimentConfig) -> SlimmableMLP:
    path = _require(cfg, NAV_WEIGHTS_FILE, "train-nav")
    net, found = load_weights(path)
    _check_hash(path, found, cfg.config_hash())
    if net.spec != cfg.nav_spec():
        raise DependencyError(f"{path} holds a different network shape; "
                              f"rerun train-nav")
    return net


def _episode_rows(logs, start_id: int = 0):
    rows = []
    for i, log in enumerate(logs):
        opt = log.optimal_steps if log.optimal_steps is not None else -1
        for t, s in enumerate(log.steps):
            rows.append(",".join([
                str(start_id + i), str(t), _fmt(float(s.position[0])),
                _fmt(float(s.position[1])), _fmt(float(s.position[2])),
                _fmt(float(s.rho)), str(s.p_f), str(s.p_d),
                _fmt(float(s.reward)), str(s.m_active),
                _fmt(float(s.mean_forward_depth)), log.outcome, str(opt)]))
    return rows


def _logs_from_rows(rows) -> list[EpisodeLog]:
    """Rebuild per-episode logs (the fields reports need) from CSV rows."""
    by_ep: dict[int, list] = {}
    for r in rows:
        by_ep.setdefault(int(r[0]), []).append(r)
    logs = []
    for ep in sorted(by_ep):
        rs = sorted(by_ep[ep], key=lambda r: int(r[1]))
        steps = [EpisodeStep(
            position=np.array([float(r[2]), float(r[3]), float(r[4])]),
            rho=float(r[5]), p_f=int(r[6]), p_d=int(r[7]),
            reward=float(r[8]), m_active=int(r[9]),
            mean_forward_depth=float(r[10]), mean_downward_depth=0.0)
            for r in rs]
        opt = int(rs[0][12])
        logs.append(EpisodeLog(steps=steps, outcome=rs[0][11],
                               spawn=steps[0].position, goal=steps[-1].position,
                               optimal_steps=None if opt < 0 else opt))
    return logs


def cmd_train_aux(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    grid = _load_world(cfg)
    nav = _load_nav(cfg)
    sampler = _build_sampler(cfg, grid)
    a = cfg.aux
    t0 = time.time()
    result = train_auxiliary(
        [sampler], nav, cfg.mode, cfg.td3_config(), cfg.reward_weights(),
        cfg.constraint_config(), depth=cfg.sensor.fifo_depth,
        rho_min=cfg.nav.rho_min, seed=a.seed,
        total_env_steps=a.total_env_steps,
        eval_every_episodes=a.eval_every_episodes,
        eval_episodes=a.eval_episodes, gate_episodes=a.gate_episodes,
        gate_distance=a.gate_distance,
        curriculum=cfg.curriculum_controller(),
        actor_hidden=tuple(a.actor_hidden),
        critic_hidden=tuple(a.critic_hidden),
        goal_radius=cfg.world.goal_radius, max_step=cfg.world.max_step,
        max_range=cfg.sensor.max_range)
    chash = cfg.config_hash()
    save_weights(result.agent.actor, _artifact(cfg, AUX_ACTOR_FILE), chash)
    save_weights(result.agent.critic1, _artifact(cfg, AUX_CRITIC_FILES[0]), chash)
    save_weights(result.agent.critic2, _artifact(cfg, AUX_CRITIC_FILES[1]), chash)
    write_csv(_artifact(cfg, AUX_EPISODES_FILE), EPISODE_COLUMNS,
              _episode_rows(result.episodes), chash)
    update_rows = [
        f"{i},{u['env_steps']},{_fmt(u['curriculum_distance'])},"
        f"{_fmt(u['critic1'])},{_fmt(u['critic2'])},{_fmt(u['q_mean'])},"
        f"{_fmt(u['actor'])}"
        for i, u in enumerate(result.update_log)]
    write_csv(_artifact(cfg, AUX_UPDATES_FILE),
              "update,env_steps,distance,critic1_loss,critic2_loss,q_mean,actor_loss",
              update_rows, chash)
    eval_rows = [
        f"{e['episode']},{e['env_steps']},{_fmt(e['distance'])},"
        f"{_fmt(e['success'])},{_fmt(e['mean_rho'])}"
        for e in result.eval_history]
    write_csv(_artifact(cfg, AUX_EVAL_FILE),
              "episode,env_steps,distance,success_rate,mean_rho", eval_rows, chash)
    gate = result.gate
    with open(_artifact(cfg, GATE_FILE), "w") as f:
        f.write(f"# config={chash}\n{gate.summary()}\n")
        for v in gate.violations:
            f.write(f"violation: {v}\n")
    print(f"auxiliary trained in {time.time() - t0:.0f}s over "
          f"{result.env_steps} env steps")
    print(gate.summary())
    if not gate.ok:
        raise ConstraintViolation(
            f"path-length gate failed with {len(gate.violations)} violations; "
            f"see {_artifact(cfg, GATE_FILE)}")
    return 0


def _load_aux_actor(cfg: ExperimentConfig) -> SlimmableMLP:
    path = _require(cfg, AUX_ACTOR_FILE, "train-aux")
    net, found = load_weights(path)
    _check_hash(path, found, cfg.config_hash())
    return net


def cmd_eval(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    grid = _load_world(cfg)
    nav = _load_nav(cfg)
    sampler = _build_sampler(cfg, grid)
    e = cfg.eval
    chash = cfg.config_hash()
    rng = np.random.default_rng(e.seed)

    # success vs distance at full width (no adaptation)
    rows = []
    for d in e.buckets:
        tasks = []
        attempts = 0
        while len(tasks) < e.episodes_per_bucket and attempts < 20 * e.episodes_per_bucket:
            attempts += 1
            try:
                tasks.append(sampler.sample("test", float(d), rng,
                                            tolerance=e.sample_tolerance))
            except ConfigError:
                continue
        rep = distill.evaluate_navigation(
            nav, grid, tasks, mode=cfg.mode, rho=1.0,
            depth=cfg.sensor.fifo_depth,
            vertical_locked=cfg.world.vertical_locked,
            goal_radius=cfg.world.goal_radius, max_step=cfg.world.max_step,
            max_range=cfg.sensor.max_range,
            max_steps=max(60, 5 * int(d)))
        rows.append(f"{d},{rep.n_episodes},{_fmt(rep.success_rate)},"
                    f"{_fmt(rep.mean_length_ratio)}")
        print(f"distance {d}: success {rep.success_rate:.3f} "
              f"over {rep.n_episodes} episodes")
    write_csv(_artifact(cfg, EVAL_SUCCESS_FILE),
              "distance,episodes,success_rate,mean_length_ratio", rows, chash)

    # error grid on the held-out dataset
    test_ds = _load_dataset(cfg, "test")
    layout = worldsim.ObservationLayout(cfg.sensor.fifo_depth)
    rows = []
    if cfg.mode == "C":
        for rho, rmse in distill.rmse_by_rho(nav, test_ds,
                                             tuple(e.rho_grid)).items():
            rows.append(f"{_fmt(rho)},{len(test_ds)},{_fmt(rmse)}")
        header = "rho,samples,rmse"
    else:
        for (p_f, p_d), rmse in distill.rmse_by_power(nav, test_ds,
                                                      layout).items():
            rows.append(f"{p_f},{p_d},{len(test_ds)},{_fmt(rmse)}")
        header = "p_f,p_d,samples,rmse"
    write_csv(_artifact(cfg, EVAL_RMSE_FILE), header, rows, chash)

    # adaptation episodes with the trained auxiliary policy
    actor = _load_aux_actor(cfg)
    logs = []
    for _ in range(e.adapt_episodes):
        try:
            task = sampler.sample("test", e.adapt_distance, rng,
                                  tolerance=e.sample_tolerance)
        except ConfigError:
            continue
        res = grid.resolution
        spawn = (np.asarray(task.spawn, dtype=float) + 0.5) * res
        goal = (np.asarray(task.goal, dtype=float) + 0.5) * res
        log = run_episode(grid, nav, None, cfg.mode, spawn=spawn, goal=goal,
                          weights=cfg.reward_weights(),
                          depth=cfg.sensor.fifo_depth,
                          rho_min=cfg.nav.rho_min,
                          goal_radius=cfg.world.goal_radius,
                          max_step=cfg.world.max_step,
                          max_range=cfg.sensor.max_range,
                          max_steps=cfg.aux.max_episode_steps,
                          vertical_locked=cfg.world.vertical_locked,
                          policy=lambda x: actor.forward(x),
                          optimal_path=task.path)
        logs.append(log)
    write_csv(_artifact(cfg, EVAL_EPISODES_FILE), EPISODE_COLUMNS,
              _episode_rows(logs), chash)
    n_ok = sum(1 for l in logs if l.outcome == REACHED)
    print(f"adaptation episodes: {n_ok}/{len(logs)} reached")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    write_config_copy(cfg)
    chash = cfg.config_hash()
    nav = _load_nav(cfg)

    # success vs distance (straight copy, keeps episode counts)
    _, rows = read_csv(_require(cfg, EVAL_SUCCESS_FILE, "eval"), chash)
    out = [",".join(r) for r in rows]
    write_csv(_artifact(cfg, REPORT_FILES["success"]),
              "distance,episodes,success_rate,mean_length_ratio", out, chash)

    # error grid
    header, rows = read_csv(_require(cfg, EVAL_RMSE_FILE, "eval"), chash)
    write_csv(_artifact(cfg, REPORT_FILES["rmse"]), ",".join(header),
              [",".join(r) for r in rows], chash)

    # adaptation tables need the episode logs
    _, ep_rows = read_csv(_require(cfg, EVAL_EPISODES_FILE, "eval"), chash)
    logs = _logs_from_rows(ep_rows)
    ok_logs = [l for l in logs if l.outcome == REACHED]

    # heatmap of mean adaptation per map cell (successful episodes only)
    bin_m = cfg.eval.heatmap_bin * cfg.world.resolution
    cells: dict[tuple[int, int], list] = {}
    for log in ok_logs:
        for s in log.steps:
            key = (int(s.position[0] // bin_m), int(s.position[1] // bin_m))
            cells.setdefault(key, []).append((s.rho, s.p_f, s.p_d))
    rows = []
    for (bx, by) in sorted(cells):
        vals = np.asarray(cells[(bx, by)], dtype=float)
        rows.append(f"{bx},{by},{len(vals)},{_fmt(vals[:, 0].mean())},"
                    f"{_fmt(vals[:, 1].mean())},{_fmt(vals[:, 2].mean())}")
    write_csv(_artifact(cfg, REPORT_FILES["heatmap"]),
              "x_bin,y_bin,steps,mean_rho,mean_p_f,mean_p_d", rows, chash)

    # adaptation vs forward clutter (normalized mean depth bins)
    width = cfg.eval.depth_bin_width
    bins: dict[int, list] = {}
    for log in ok_logs:
        for s in log.steps:
            bins.setdefault(int(s.mean_forward_depth / width), []).append(
                (s.rho, s.p_f, s.p_d))
    rows = []
    for b in sorted(bins):
        vals = np.asarray(bins[b], dtype=float)
        rows.append(f"{_fmt(b * width)},{_fmt((b + 1) * width)},{len(vals)},"
                    f"{_fmt(vals[:, 0].mean())},{_fmt(vals[:, 1].mean())},"
                    f"{_fmt(vals[:, 2].mean())}")
    write_csv(_artifact(cfg, REPORT_FILES["depth_bins"]),
              "depth_lo,depth_hi,steps,mean_rho,mean_p_f,mean_p_d", rows, chash)

    # resource summary over successful adaptation episodes
    if ok_logs:
        eta = compute_eta(ok_logs, nav.spec)
        summary = (f"{cfg.mode},{eta.n_episodes},{_fmt(eta.mean_rho)},"
                   f"{format_percent(eta.eta_m)},{_fmt(eta.mean_p_f)},"
                   f"{_fmt(eta.mean_p_d)},{format_percent(eta.eta_w, 1)}")
    else:
        summary = f"{cfg.mode},0,nan,nan,nan,nan,nan"
    write_csv(_artifact(cfg, REPORT_FILES["summary"]),
              "mode,episodes,mean_rho,eta_m,mean_p_f,mean_p_d,eta_w",
              [summary], chash)

    # timing table mirrors the benchmark artifact when present
    bench_path = _artifact(cfg, BENCH_FILE)
    if os.path.exists(bench_path):
        header, rows = read_csv(bench_path, chash)
        write_csv(_artifact(cfg, REPORT_FILES["timing"]), ",".join(header),
                  [",".join(r) for r in rows], chash)
    print(f"report bundle written to {cfg.out_dir}")
    return 0


def _bench_policy_rhos(cfg: ExperimentConfig, obs: np.ndarray) -> np.ndarray:
    """Slimming factors the benchmark runs at: the trained auxiliary actor's
    outputs when its weights exist, otherwise a fresh seeded actor."""
    actor_path = _artifact(cfg, AUX_ACTOR_FILE)
    if os.path.exists(actor_path):
        actor, found = load_weights(actor_path)
        _check_hash(actor_path, found, cfg.config_hash())
    else:
        spec = MLPSpec(u=obs.shape[1], q=tuple(cfg.bench.aux_hidden), v=1,
                       output_activation="bounded",
                       output_low=(cfg.nav.rho_min,), output_high=(1.0,))
        actor = SlimmableMLP(spec, seed=cfg.bench.seed)
    return np.array([float(np.clip(actor.forward(x)[0], cfg.nav.rho_min, 1.0))
                     for x in obs])


def cmd_bench(cfg: ExperimentConfig) -> int:
    """Time full-width inference against auxiliary-adapted truncated
    inference on a static observation set; speedup = (v - u) / v."""
    write_config_copy(cfg)
    b = cfg.bench
    chash = cfg.config_hash()
    rng = np.random.default_rng(b.seed)
    n_in = cfg.sensor.fifo_depth * OBS_WIDTH
    obs = rng.uniform(0.0, 1.0, size=(b.n_observations, n_in))
    rhos = _bench_policy_rhos(cfg, obs)
    aux_spec = MLPSpec(u=n_in, q=tuple(b.aux_hidden), v=1,
                       output_activation="bounded",
                       output_low=(cfg.nav.rho_min,), output_high=(1.0,))
    aux = SlimmableMLP(aux_spec, seed=b.seed)
    rows = []
    for size in b.sizes:
        spec = MLPSpec(u=n_in, q=tuple(int(h) for h in size), v=3,
                       output_activation="tanh",
                       output_scale=cfg.nav.output_scale)
        nav = SlimmableMLP(spec, seed=b.seed)
        # materialize each distinct truncated sub-network once; at flight
        # time the sub-network persists until the factor changes
        subs = {}
        for rho in rhos:
            mask = SlimMask(spec, float(rho))
            if mask.active_hidden not in subs:
                subs[mask.active_hidden] = nav.truncated(mask)
        t_full = []
        t_slim = []
        for _ in range(b.repeats):
            t0 = time.perf_counter()
            for x in obs:
                nav.forward(x)
            t_full.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            for x, rho in zip(obs, rhos):
                aux.forward(x)
                mask = SlimMask(spec, float(rho))
                subs[mask.active_hidden].forward(x)
            t_slim.append(time.perf_counter() - t0)
        v = float(np.median(t_full))
        u = float(np.median(t_slim))
        speedup = (v - u) / v
        label = "x".join(str(int(h)) for h in size)
        rows.append(f"{label},{_fmt(v)},{_fmt(u)},{_fmt(float(rhos.mean()))},"
                    f"{_fmt(speedup)}")
        print(f"size [{label}]: full {v * 1e3:.2f} ms, adapted {u * 1e3:.2f} ms, "
              f"speedup {speedup:+.3f}")
    write_csv(_artifact(cfg, BENCH_FILE),
              "hidden,t_full_s,t_adapted_s,mean_rho,speedup", rows, chash)
    return 0


# entry point


COMMANDS = {
    "gen-world": cmd_gen_world,
    "oracle": cmd_oracle,
    "train-nav": cmd_train_nav,
    "train-aux": cmd_train_aux,
    "eval": cmd_eval,
    "report": cmd_report,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimnav",
        description="adaptive drone navigation experiments on voxel worlds")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       dest="overrides",
                       help="override a config key, e.g. world.density=0.2")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    return COMMANDS[args.command](cfg)


def entry() -> None:
    try:
        code = main()
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        code = 2
    except (DependencyError, LoadError) as e:
        print(f"dependency error: {e}", file=sys.stderr)
        code = 3
    except ConstraintViolation as e:
        print(f"constraint violation: {e}", file=sys.stderr)
        code = 4
    sys.exit(code)


if __name__ == "__main__":
    entry()
