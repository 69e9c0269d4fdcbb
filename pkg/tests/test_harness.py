import csv
import json

import numpy as np
import pytest

from semloc import harness
from semloc.cli import main
from semloc.embedder import GcnModel
from semloc.harness import ACTIVE, PASSIVE, SINGLE_VIEW, Config, Perception, run_episode
from semloc.planner import QDatabase
from semloc.world import generate_world, sample_free_poses

FAST = Config(n_particles=500, n_train_episodes=30, checkpoint_period=10, n_test_episodes=5)


@pytest.fixture(scope="module")
def perception():
    w = generate_world(0)
    return Perception(w, GcnModel.init(w.grid.n_classes, seed=0))


@pytest.fixture(scope="module")
def starts(perception):
    return sample_free_poses(perception.world, 6, np.random.default_rng(0))


# -- episodes ------------------------------------------------------------------

def test_single_view_senses_once(perception, starts):
    r = run_episode(perception, starts[0], FAST, SINGLE_VIEW, np.random.default_rng(0))
    assert r.n_senses == 1 and r.actions == [] and len(r.poses) == 1


@pytest.mark.parametrize("length", [1, 4, 6])
def test_multi_view_senses_one_plus_l(perception, starts, length):
    cfg = Config(n_particles=500, episode_length=length)
    before = perception.n_senses
    r = run_episode(perception, starts[1], cfg, PASSIVE, np.random.default_rng(0))
    assert r.n_senses == 1 + length == perception.n_senses - before
    assert len(r.actions) == length and len(r.states) == length + 1
    r = run_episode(perception, starts[1], cfg, ACTIVE, np.random.default_rng(0), QDatabase(192))
    assert r.n_senses == 1 + length


def test_passive_actions_are_uniform(perception, starts):
    rng = np.random.default_rng(1)
    acts = []
    for i in range(150):
        acts += run_episode(perception, starts[i % 6], Config(n_particles=200), PASSIVE, rng).actions
    counts = np.bincount(acts, minlength=3)
    assert np.all(np.abs(counts - 200) < 4 * np.sqrt(600 * (1 / 3) * (2 / 3)))


def test_reward_matches_success(perception, starts):
    for i, p in enumerate(starts):
        r = run_episode(perception, p, FAST, PASSIVE, np.random.default_rng(i))
        assert r.success == (r.predicted_class == r.true_class)
        assert r.reward == (1.0 if r.success else -1.0)


def test_active_eval_is_deterministic_and_read_only(perception, starts):
    db = harness.train_planner(perception, starts, FAST, seed=0)
    n = len(db)
    a = run_episode(perception, starts[2], FAST, ACTIVE, np.random.default_rng(4), db)
    b = run_episode(perception, starts[2], FAST, ACTIVE, np.random.default_rng(4), db)
    assert a.actions == b.actions and a.poses == b.poses and a.success == b.success
    assert len(db) == n
    assert all(db.greedy(s) == act for s, act in zip(a.states, a.actions))


def test_train_mode_writes_backward_updates(perception, starts):
    db = QDatabase(192)
    r = run_episode(perception, starts[3], FAST, ACTIVE, np.random.default_rng(0), db, mode="train")
    assert sum(db.counts()) == len({(s.tobytes(), a) for s, a in zip(r.states, r.actions)})
    # terminal pair received alpha * reward on an empty database
    assert db.estimate(r.states[-2], r.actions[-1]) == pytest.approx(0.1 * r.reward)


def test_episode_argument_errors(perception, starts):
    with pytest.raises(ValueError):
        run_episode(perception, starts[0], FAST, "teleport", np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_episode(perception, starts[0], FAST, ACTIVE, np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_episode(perception, starts[0], FAST, PASSIVE, np.random.default_rng(0), mode="test")


def test_perception_rejects_class_mismatch():
    with pytest.raises(ValueError):
        Perception(generate_world(0), GcnModel.init(10))


# -- training and selection --------------------------------------------------------

def test_train_planner_checkpoints(perception, starts):
    db = harness.train_planner(perception, starts, FAST, seed=0)
    assert sorted(db.checkpoints) == [10, 20, 30]
    again = harness.train_planner(perception, starts, FAST, seed=0)
    for a in range(3):
        for x, y in zip(db.records(a), again.records(a)):
            np.testing.assert_array_equal(x, y)


def checkpointed_db(n):
    db = QDatabase(2)
    for c in range(1, n + 1):
        db.update(np.array([float(c), 0.0]), 0, 1.0)
        db.checkpoint(c * 1000)
    return db


def test_uda_ties_go_to_latest(perception, monkeypatch):
    monkeypatch.setattr(harness, "evaluate", lambda *a, **k: 50.0)
    best, scores = harness.uda_select(perception, checkpointed_db(5), np.zeros((10, 3)), FAST)
    assert best == 5000 and set(scores) == {1000, 2000, 3000, 4000, 5000}


def test_uda_strictly_improving_picks_last(perception, monkeypatch):
    # validation accuracy grows with the number of records visible at the checkpoint
    monkeypatch.setattr(harness, "evaluate", lambda p, poses, cfg, m, qf, seed=0: 10.0 * len(qf))
    best, scores = harness.uda_select(perception, checkpointed_db(4), np.zeros((10, 3)), FAST)
    assert best == 4000 and list(scores.values()) == [10.0, 20.0, 30.0, 40.0]


def test_uda_prefers_interior_peak(perception, monkeypatch):
    acc = {1: 20.0, 2: 70.0, 3: 40.0}
    monkeypatch.setattr(harness, "evaluate", lambda p, poses, cfg, m, qf, seed=0: acc[len(qf)])
    assert harness.uda_select(perception, checkpointed_db(3), np.zeros((10, 3)), FAST)[0] == 2000


def test_uda_without_checkpoints(perception):
    with pytest.raises(ValueError):
        harness.uda_select(perception, QDatabase(3), np.zeros((10, 3)), FAST)


def test_evaluate_range(perception, starts):
    acc = harness.evaluate(perception, starts, FAST, PASSIVE)
    assert 0.0 <= acc <= 100.0 and acc * len(starts) / 100 == pytest.approx(round(acc * len(starts) / 100))


# -- experiment and report --------------------------------------------------------

TINY = Config(n_particles=300, n_train_episodes=20, checkpoint_period=10, n_test_episodes=5, n_train_poses=20,
              n_validation=3, n_scenes=200, gcn_epochs=2)


def test_run_experiment_reproducible(tmp_path):
    settings = [(1.0, 90), (0.2, 10)]
    rows, timing = harness.run_experiment([0], TINY, settings)
    again, _ = harness.run_experiment([0], TINY, settings)
    assert rows == again
    assert [(r["T_xy"], r["T_theta"]) for r in rows] == settings
    for r in rows:
        assert set(r) == set(harness.RESULT_COLUMNS)
        assert all(0 <= r[k] <= 100 for k in ("SV", "MV", "Ours", "DA"))
        assert r["DA_checkpoint"] in (10, 20)
    assert set(timing) == {"graph_build", "gcn", "planning"} and all(v > 0 for v in timing.values())

    paths = harness.report(rows, timing, tmp_path)
    with open(paths[0]) as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["T_xy", "T_theta", "SV", "MV", "Ours", "DA"] and len(table) == 3
    with open(paths[-1]) as fh:
        assert [row[0] for row in csv.reader(fh)] == ["stage", "graph_build", "gcn", "planning"]


def test_default_settings_cover_grid():
    s = harness.default_settings()
    assert len(s) == 25 == len(set(s)) and s[0] == (1.0, 90)


# -- config ---------------------------------------------------------------------

def test_config_defaults():
    c = Config()
    assert (c.episode_length, c.alpha, c.gamma, c.n_train_episodes, c.checkpoint_period, c.n_test_episodes,
            c.n_validation) == (4, 0.1, 0.9, 10_000, 1000, 100, 10)


def test_config_from_dict(tmp_path):
    assert Config.from_dict({"alpha": 0.5}).alpha == 0.5
    with pytest.raises(ValueError):
        Config.from_dict({"alpah": 0.5})
    with pytest.raises(ValueError):
        Config(episode_length=0)
    (tmp_path / "c.json").write_text(json.dumps({"gamma": 0.5}))
    assert Config.load(tmp_path / "c.json").gamma == 0.5


# -- CLI ------------------------------------------------------------------------

def test_cli_pipeline(tmp_path, capsys):
    d = tmp_path
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"n_particles": 300, "n_validation": 3}))
    run = lambda *a: main(["--config", str(cfg), *map(str, a)])
    assert run("gen-world", "--seed", 1, "--out", d / "w.json") == 0
    assert run("gen-scenes", "--world", d / "w.json", "--n", 100, "--out", d / "s.jsonl") == 0
    assert run("train-gcn", "--scenes", d / "s.jsonl", "--world", d / "w.json", "--out-model", d / "m.bin",
               "--epochs", 2) == 0
    assert run("sample-splits", "--world", d / "w.json", "--txy", 0.4, "--ttheta", 30, "--out", d / "sp.json",
               "--n-test", 4, "--n-train", 10) == 0
    common = ["--world", d / "w.json", "--model", d / "m.bin"]
    assert run("train-planner", *common, "--splits", d / "sp.json", "--out-db", d / "q.bin", "--episodes", 20,
               "--checkpoint-period", 10) == 0
    capsys.readouterr()
    assert run("uda-select", *common, "--db", d / "q.bin", "--validation", d / "sp.json") == 0
    assert json.loads(capsys.readouterr().out)["checkpoint"] in (10, 20)
    for method in ("sv", "mv", "active", "da"):
        out = d / f"{method}.csv"
        assert run("eval", *common, "--method", method, "--splits", d / "sp.json", "--db", d / "q.bin",
                   "--out-csv", out) == 0
        with open(out) as fh:
            (row,) = list(csv.DictReader(fh))
        assert row["method"] == method and 0 <= float(row["top1"]) <= 100


def test_cli_errors(tmp_path, capsys):
    assert main(["gen-scenes", "--world", str(tmp_path / "missing.json"), "--out", str(tmp_path / "s")]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert main(["--config", str(tmp_path / "bad.json"), "gen-world", "--out", str(tmp_path / "w.json")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["eval", "--method", "xx", "--world", "a", "--model", "b", "--splits", "c"])


def test_split_retry_redraws_test_set(monkeypatch):
    calls = []
    real = harness.sample_splits

    def flaky(world, spec, rng):
        calls.append(rng)
        if len(calls) < 3:
            raise harness.SplitSamplingError("covered")
        return real(world, spec, rng)

    monkeypatch.setattr(harness, "sample_splits", flaky)
    w = generate_world(0)
    s = harness.sample_splits_retrying(w, harness.SplitSpec(0.2, 10, n_train=20), [0, 10])
    assert len(calls) == 3 and len(s.train) == 20

    def never(world, spec, rng):
        raise harness.SplitSamplingError("covered")

    monkeypatch.setattr(harness, "sample_splits", never)
    with pytest.raises(harness.SplitSamplingError):
        harness.sample_splits_retrying(w, harness.SplitSpec(0.2, 10), [0, 10], attempts=2)


def test_split_retry_first_attempt_uses_seed_as_given():
    w = generate_world(0)
    spec = harness.SplitSpec(0.4, 30, n_train=20)
    a = harness.sample_splits_retrying(w, spec, [3, 11])
    b = harness.sample_splits(w, spec, np.random.default_rng([3, 11]))
    np.testing.assert_array_equal(a.train, b.train)
