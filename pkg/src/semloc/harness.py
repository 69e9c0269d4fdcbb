"""End-to-end episodes, planner training, evaluation and result tables.

Three localization methods share the same perception and particle filter:

* ``single_view`` senses once at the start pose and stops;
* ``passive_multi_view`` takes ``episode_length`` uniformly random actions;
* ``active`` picks actions greedily (or epsilon-greedily while training) from
  the nearest-neighbor Q function evaluated on the latest rank state.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tracker
from .embedder import GcnModel, TrainConfig, gcn_forward, pose_to_class, scores_to_rank_state, train_gcn
from .planner import QDatabase, epsilon_schedule, select_action
from .scenegraph import build_graph
from .world import (TTHETA_GRID, TXY_GRID, SplitSamplingError, SplitSpec, Splits, WorldModel,
                    generate_scenes, generate_world, render, sample_splits, step)

log = logging.getLogger(__name__)

SINGLE_VIEW = "single_view"
PASSIVE = "passive_multi_view"
ACTIVE = "active"
METHODS = (SINGLE_VIEW, PASSIVE, ACTIVE)


@dataclass
class Config:
    """Every numeric default of the pipeline; a JSON config file may override any field."""

    episode_length: int = 4
    reward_success: float = 1.0
    reward_failure: float = -1.0
    n_train_episodes: int = 10_000
    alpha: float = 0.1
    gamma: float = 0.9
    checkpoint_period: int = 1000
    n_test_episodes: int = 100
    n_validation: int = 10
    n_train_poses: int = 500
    n_particles: int = tracker.N_PARTICLES
    n_guide: int = tracker.N_GUIDE
    n_scenes: int = 10_000
    gcn_epochs: int = 100
    gcn_batch_size: int = 32
    gcn_learning_rate: float = 1e-3
    world_size: float = 8.0

    def __post_init__(self):
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class Perception:
    """render -> scene graph -> GCN -> rank state, memoized by pose and by graph.

    Rendering is a pure function of the pose, and the GCN a pure function of
    the graph, so both caches are exact. Wall-clock time of uncached graph
    builds and GCN passes is accumulated in ``timing``.
    """

    def __init__(self, world: WorldModel, model: GcnModel):
        self.world = world
        self.model = model
        self.grid = world.grid
        if model.n_classes != self.grid.n_classes:
            raise ValueError(f"model predicts {model.n_classes} classes, world grid has {self.grid.n_classes}")
        self._by_pose: dict[tuple, np.ndarray] = {}
        self._by_graph: dict = {}
        self.timing = {"graph_build": [0.0, 0], "gcn": [0.0, 0], "planning": [0.0, 0]}
        self.n_senses = 0

    def _tick(self, key, t0):
        rec = self.timing[key]
        rec[0] += time.perf_counter() - t0
        rec[1] += 1

    def rank_state(self, pose) -> np.ndarray:
        self.n_senses += 1
        key = tuple(pose)
        rs = self._by_pose.get(key)
        if rs is not None:
            return rs
        t0 = time.perf_counter()
        graph = build_graph(render(self.world, pose))
        self._tick("graph_build", t0)
        rs = self._by_graph.get(graph)
        if rs is None:
            t0 = time.perf_counter()
            rs = scores_to_rank_state(gcn_forward(graph, self.model))
            rs.flags.writeable = False
            self._tick("gcn", t0)
            self._by_graph[graph] = rs
        self._by_pose[key] = rs
        return rs

    def timing_summary(self) -> dict[str, float]:
        """Mean milliseconds per uncached call."""
        return {k: (1e3 * t / n if n else 0.0) for k, (t, n) in self.timing.items()}


@dataclass
class EpisodeResult:
    success: bool
    reward: float
    poses: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    states: list = field(default_factory=list)
    n_senses: int = 0
    predicted_class: int = -1
    true_class: int = -1


def run_episode(perception: Perception, start_pose, config: Config, method: str,
                rng: np.random.Generator, qf=None, mode: str = "eval",
                episode_index: int = 0) -> EpisodeResult:
    """One plan-act-sense episode; in ``train`` mode the Q database is updated at the end."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == ACTIVE and qf is None:
        raise ValueError("the active method needs a Q function")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    world, grid = perception.world, perception.grid
    pose = tuple(float(v) for v in start_pose)
    state = perception.rank_state(pose)
    n_senses = 1
    ps = tracker.init_guided(state, grid, rng, config.n_particles, config.n_guide)
    ps = tracker.update(ps, state, grid, rng)
    poses, actions, states = [pose], [], [state]

    if method != SINGLE_VIEW:
        eps = epsilon_schedule(episode_index) if mode == "train" else 0.0
        for _ in range(config.episode_length):
            if method == ACTIVE:
                t0 = time.perf_counter()
                action = select_action(qf, state, eps, rng)
                perception._tick("planning", t0)
            else:
                action = int(rng.integers(len(tracker.ACTIONS)))
            pose = step(world, pose, action)
            ps = tracker.predict(ps, action, grid, rng)
            state = perception.rank_state(pose)
            n_senses += 1
            ps = tracker.update(ps, state, grid, rng)
            poses.append(pose)
            actions.append(action)
            states.append(state)

    predicted = tracker.top1_class(ps, grid)
    truth = pose_to_class(pose, grid)
    success = predicted == truth
    reward = config.reward_success if success else config.reward_failure

    if mode == "train" and method == ACTIVE:
        # sparse terminal reward, propagated backward along the trajectory
        for t in reversed(range(len(actions))):
            last = t == len(actions) - 1
            qf.update(states[t], actions[t], reward if last else 0.0,
                      None if last else states[t + 1], config.alpha, config.gamma)
    return EpisodeResult(success, reward, poses, actions, states, n_senses, predicted, truth)


def _episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def train_planner(perception: Perception, train_poses: np.ndarray, config: Config, seed: int = 0) -> QDatabase:
    """NNQL training from random train-split start poses with periodic checkpoints."""
    db = QDatabase(perception.grid.n_classes, n_actions=len(tracker.ACTIONS))
    rng = np.random.default_rng([seed, 1])
    for n in range(config.n_train_episodes):
        start = train_poses[rng.integers(len(train_poses))]
        run_episode(perception, start, config, ACTIVE, rng, db, mode="train", episode_index=n)
        if (n + 1) % config.checkpoint_period == 0:
            db.checkpoint(n + 1)
    return db


def evaluate(perception: Perception, start_poses: np.ndarray, config: Config, method: str,
             qf=None, seed: int = 0) -> float:
    """Top-1 accuracy (%) over episodes from the given start poses.

    Episode i uses the same random stream for every method, so methods see
    identical motion noise.
    """
    hits = 0
    for i, start in enumerate(start_poses):
        hits += run_episode(perception, start, config, method, _episode_rng(seed, 3, i), qf).success
    return 100.0 * hits / len(start_poses)


def uda_select(perception: Perception, db: QDatabase, validation_poses: np.ndarray, config: Config,
               seed: int = 0) -> tuple[int, dict[int, float]]:
    """Checkpoint with the best validation accuracy; ties go to the latest checkpoint."""
    if not db.checkpoints:
        raise ValueError("database has no checkpoints")
    scores = {}
    best, best_acc = None, -1.0
    for c in sorted(db.checkpoints):
        acc = evaluate(perception, validation_poses, config, ACTIVE, db.restore(c), seed)
        scores[c] = acc
        if acc >= best_acc:
            best, best_acc = c, acc
    return best, scores


# -- experiments ---------------------------------------------------------------

RESULT_COLUMNS = ("world_seed", "T_xy", "T_theta", "SV", "MV", "Ours", "DA", "DA_checkpoint")


def build_gcn(world: WorldModel, config: Config, seed: int) -> tuple[GcnModel, float]:
    from .scenegraph import parse_scene_record
    rng = np.random.default_rng([seed, 0])
    data = []
    for rec in generate_scenes(world, config.n_scenes, rng):
        _, regions, cid = parse_scene_record(rec)
        data.append((build_graph(regions), cid))
    res = train_gcn(data, world.grid.n_classes,
                    TrainConfig(config.gcn_epochs, config.gcn_batch_size, config.gcn_learning_rate, seed=seed))
    return res.model, res.train_accuracy


def run_setting(perception: Perception, splits: Splits, config: Config, seed: int) -> dict:
    test = splits.test[:config.n_test_episodes]
    row = {
        "T_xy": splits.t_xy, "T_theta": splits.t_theta,
        "SV": evaluate(perception, test, config, SINGLE_VIEW, seed=seed),
        "MV": evaluate(perception, test, config, PASSIVE, seed=seed),
    }
    db = train_planner(perception, splits.train, config, seed)
    row["Ours"] = evaluate(perception, test, config, ACTIVE, db, seed=seed)
    best, _ = uda_select(perception, db, splits.validation, config, seed)
    row["DA"] = evaluate(perception, test, config, ACTIVE, db.restore(best), seed=seed)
    row["DA_checkpoint"] = best
    return row


def default_settings() -> list[tuple[float, float]]:
    """All 25 (T_xy, T_theta) pairs, hardest gap first."""
    return [(txy, tth) for txy in reversed(TXY_GRID) for tth in reversed(TTHETA_GRID)]


def sample_splits_retrying(world: WorldModel, spec: SplitSpec, seed: list[int], attempts: int = 5) -> Splits:
    """Split sampling that redraws the test set when it leaves no room for the gap.

    At the widest location gap a uniform test set occasionally covers the
    whole room, so no train pose can qualify. Attempt 0 uses ``seed`` as
    given; later attempts append the attempt number.
    """
    for attempt in range(attempts):
        rng = np.random.default_rng(seed if attempt == 0 else [*seed, attempt])
        try:
            return sample_splits(world, spec, rng)
        except SplitSamplingError as exc:
            log.warning("redrawing test set (attempt %d): %s", attempt + 1, exc)
    raise SplitSamplingError(f"no feasible split for T_xy={spec.t_xy}, T_theta={spec.t_theta} "
                             f"after {attempts} test sets")


def run_world(world_seed: int, config: Config, settings: Sequence[tuple[float, float]]):
    """Train a GCN for one world and run every setting; returns rows and raw timing sums."""
    world = generate_world(world_seed, (config.world_size, config.world_size))
    model, acc = build_gcn(world, config, world_seed)
    log.info("world %d: GCN train accuracy %.3f", world_seed, acc)
    perception = Perception(world, model)
    rows = []
    for k, (txy, tth) in enumerate(settings):
        spec = SplitSpec(txy, tth, n_test=config.n_test_episodes, n_train=config.n_train_poses,
                         n_validation=config.n_validation)
        splits = sample_splits_retrying(world, spec, [world_seed, 10 + k])
        row = {"world_seed": world_seed, **run_setting(perception, splits, config, seed=world_seed * 1000 + k)}
        log.info("%s", row)
        rows.append(row)
    return rows, perception.timing


def run_experiment(world_seeds: Sequence[int], config: Config | None = None,
                   settings: Sequence[tuple[float, float]] | None = None,
                   workers: int = 1) -> tuple[list[dict], dict]:
    """Full results table over world seeds; worlds run in separate processes when workers > 1.

    Every world derives its random streams from its own seed, so the rows do
    not depend on ``workers``.
    """
    config = config or Config()
    settings = list(settings or default_settings())
    if workers > 1 and len(world_seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(workers, len(world_seeds))) as pool:
            parts = list(pool.map(run_world, world_seeds, [config] * len(world_seeds),
                                  [settings] * len(world_seeds)))
    else:
        parts = [run_world(ws, config, settings) for ws in world_seeds]
    rows = []
    timing = {"graph_build": [0.0, 0], "gcn": [0.0, 0], "planning": [0.0, 0]}
    for part_rows, part_timing in parts:
        rows.extend(part_rows)
        for key, (t, n) in part_timing.items():
            timing[key][0] += t
            timing[key][1] += n
    summary = {k: (1e3 * t / n if n else 0.0) for k, (t, n) in timing.items()}
    return rows, summary


def report(rows: Sequence[dict], timing: dict[str, float], out_dir) -> list[str]:
    """One results CSV per world seed plus a timing CSV; returns the written paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for ws in sorted({r["world_seed"] for r in rows}):
        path = os.path.join(out_dir, f"results_world{ws}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T_xy", "T_theta", "SV", "MV", "Ours", "DA"])
            for r in rows:
                if r["world_seed"] == ws:
                    w.writerow([r["T_xy"], r["T_theta"], r["SV"], r["MV"], r["Ours"], r["DA"]])
        written.append(path)
    path = os.path.join(out_dir, "timing.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "ms_per_call"])
        for k in ("graph_build", "gcn", "planning"):
            w.writerow([k, f"{timing.get(k, 0.0):.4f}"])
    written.append(path)
    return written


def config_dict(config: Config) -> dict:
    return asdict(config)
