import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import convergence_trials, systematic_counts
from semloc import tracker as T
from semloc.embedder import PlaceClassGrid, scores_to_rank_state, top_classes

GRID = PlaceClassGrid(0, 8, 0, 8)
C = GRID.n_classes


def ranked(*top):
    """Rank state with the given classes first, in order, then ascending ids."""
    scores = np.zeros(C)
    for i, c in enumerate(top):
        scores[c] = len(top) - i
    return scores_to_rank_state(scores)


def particles(x, y, t, w=None):
    x, y, t = (np.asarray(v, dtype=float) for v in (x, y, t))
    w = np.full(len(x), 1.0 / len(x)) if w is None else np.asarray(w, dtype=float)
    return T.ParticleSet.from_arrays(x, y, t, w)


# -- guided init ----------------------------------------------------------------

def test_k1_all_in_top_class():
    rng = np.random.default_rng(0)
    ps = T.init_guided(ranked(77), GRID, rng, 500, 1)
    assert np.all(ps.classes(GRID) == 77)
    np.testing.assert_allclose(ps.w, 1 / 500)


def test_exact_division():
    ps = T.init_guided(ranked(5, 100, 191), GRID, np.random.default_rng(0), 6, 3)
    assert sorted(np.bincount(ps.classes(GRID), minlength=C)[[5, 100, 191]]) == [2, 2, 2]


def test_remainder_to_top_class():
    ps = T.init_guided(ranked(40, 3, 150), GRID, np.random.default_rng(1), 5000, 3)
    counts = np.bincount(ps.classes(GRID), minlength=C)
    assert (counts[40], counts[3], counts[150]) == (1668, 1666, 1666)
    assert counts.sum() == 5000


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, C - 1), min_size=3, max_size=3, unique=True), st.integers(0, 2 ** 32 - 1))
def test_all_initial_particles_inside_chosen_cells(top, seed):
    rs = ranked(*top)
    ps = T.init_guided(rs, GRID, np.random.default_rng(seed), 3000, 3)
    chosen = set(top_classes(rs, 3).tolist())
    assert chosen == set(top)
    assert set(np.unique(ps.classes(GRID)).tolist()) <= chosen


def test_init_errors():
    with pytest.raises(ValueError):
        T.init_guided(ranked(1), GRID, np.random.default_rng(0), 0)
    with pytest.raises(ValueError):
        T.init_guided(ranked(1), GRID, np.random.default_rng(0), 10, C + 1)


# -- predict ------------------------------------------------------------------

def test_noise_free_rotation():
    ps = particles([1, 2, 3], [1, 1, 1], [0, 0, 0])
    out = T.predict(ps, T.ROTATE_LEFT, GRID, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_array_equal(out.theta, [30, 30, 30])
    out = T.predict(ps, T.ROTATE_RIGHT, GRID, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_array_equal(out.theta, [330, 330, 330])


def test_noise_free_forward_along_x():
    out = T.predict(particles([1], [1], [0]), T.FORWARD, GRID, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_allclose([out.x[0], out.y[0]], [1.5, 1.0], atol=1e-12)
    out = T.predict(particles([1], [1], [90]), T.FORWARD, GRID, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_allclose([out.x[0], out.y[0]], [1.0, 1.5], atol=1e-12)


def test_forward_clamps_to_workspace():
    out = T.predict(particles([7.9, 0.1], [4, 0.2], [0, 225]), T.FORWARD, GRID, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_allclose(out.x, [8.0, 0.0])
    np.testing.assert_allclose(out.y, [4.0, 0.0])


def test_predict_keeps_weights_and_input():
    ps = particles([1, 2], [1, 2], [10, 20], [0.25, 0.75])
    out = T.predict(ps, T.FORWARD, GRID, np.random.default_rng(0))
    np.testing.assert_array_equal(out.w, [0.25, 0.75])
    np.testing.assert_array_equal(ps.x, [1, 2])


def test_noise_statistics():
    m = 20000
    ps = particles(np.full(m, 4.0), np.full(m, 4.0), np.full(m, 90.0))
    fwd = T.predict(ps, T.FORWARD, GRID, np.random.default_rng(0))
    assert abs(np.std(fwd.x) - 0.1) < 0.005 and abs(np.mean(fwd.y) - 4.5) < 0.005
    np.testing.assert_array_equal(fwd.theta, 90.0)      # no heading noise on translation
    rot = T.predict(ps, T.ROTATE_LEFT, GRID, np.random.default_rng(0))
    assert abs(np.std(rot.theta) - 5.0) < 0.2 and abs(np.mean(rot.theta) - 120.0) < 0.1
    np.testing.assert_array_equal(rot.x, 4.0)           # no position noise on rotation


def test_predict_is_reproducible():
    ps = T.init_guided(ranked(3, 4, 5), GRID, np.random.default_rng(0), 1000)
    a = T.predict(ps, T.FORWARD, GRID, np.random.default_rng(7))
    b = T.predict(ps, T.FORWARD, GRID, np.random.default_rng(7))
    np.testing.assert_array_equal(a.pose, b.pose)


def test_unknown_action():
    with pytest.raises(ValueError):
        T.predict(particles([1], [1], [0]), 3, GRID, np.random.default_rng(0))


# -- update -------------------------------------------------------------------

def test_uniform_observation_leaves_weights():
    rng = np.random.default_rng(0)
    ps = particles(rng.uniform(0, 8, 50), rng.uniform(0, 8, 50), rng.uniform(0, 360, 50), rng.dirichlet(np.ones(50)))
    out = T.update(ps, np.full(C, 0.3), GRID, rng, resample=False)
    np.testing.assert_allclose(out.w, ps.w, rtol=1e-12)


def test_all_particles_in_top_class_stay_uniform():
    ps = T.init_guided(ranked(9), GRID, np.random.default_rng(0), 100, 1)
    out = T.update(ps, ranked(9), GRID, np.random.default_rng(0))
    np.testing.assert_allclose(out.w, 1 / 100, rtol=1e-12)


def test_bayes_ratio():
    # class 0 and class 12 (next location cell) get rank values 1 and 1/2
    ps = particles([0.5] * 4 + [0.5] * 4, [0.5] * 4 + [2.5] * 4, [10] * 8)
    assert list(ps.classes(GRID)) == [0] * 4 + [12] * 4
    out = T.update(ps, ranked(0, 12), GRID, np.random.default_rng(0), resample=False)
    ratio = out.w[:4].sum() / out.w[4:].sum()
    assert ratio == pytest.approx(2.0, rel=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2 ** 32 - 1))
def test_weights_normalized_after_update(m, seed):
    rng = np.random.default_rng(seed)
    ps = particles(rng.uniform(0, 8, m), rng.uniform(0, 8, m), rng.uniform(0, 360, m), rng.dirichlet(np.ones(m)))
    out = T.update(ps, scores_to_rank_state(rng.normal(size=C)), GRID, rng)
    assert abs(out.w.sum() - 1) < 1e-9 and np.all(out.w >= 0)


def test_resampling_triggers_below_half_ess():
    # 10 particles, one dominant: ESS falls far below M/2 and weights come back uniform
    ps = particles([0.5] + [7.5] * 9, [0.5] * 10, [0] * 10)
    out = T.update(ps, ranked(0), GRID, np.random.default_rng(0))
    np.testing.assert_allclose(out.w, 0.1)
    # the dominant particle holds 1 / (1 + 9/145) of the mass, so it gets 9 or 10 copies
    assert np.sum(out.classes(GRID) == 0) >= 9


def test_systematic_matches_cumsum_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = int(rng.integers(1, 60))
        w = rng.dirichlet(np.ones(m) * 0.3)
        u = float(rng.random())
        idx = T._systematic(w, u)
        np.testing.assert_array_equal(np.bincount(idx, minlength=m), systematic_counts(w, u))


def test_resampling_preserves_cell_occupancy():
    rng = np.random.default_rng(0)
    m = 200
    cells = rng.integers(0, 5, m)                          # location cells 0..4 along y = 0.5
    ps = particles(0.5 + 2 * (cells % 4), 0.5 + 2 * (cells // 4), np.zeros(m), rng.dirichlet(np.ones(m)))
    loc_of_cell = GRID.location_index(0.5 + 2 * (np.arange(5) % 4), 0.5 + 2 * (np.arange(5) // 4))
    p_cell = np.bincount(cells, weights=ps.w, minlength=5)
    sigma = np.sqrt(m * p_cell * (1 - p_cell))
    counts = np.empty((1000, 5))
    for r in range(1000):
        out = T.systematic_resample(ps, rng)
        idx = GRID.location_index(out.x, out.y)
        counts[r] = [np.sum(idx == loc_of_cell[c]) for c in range(5)]
    assert np.all(np.abs(counts - m * p_cell) <= 3 * sigma)
    assert np.all(np.abs(counts.mean(axis=0) - m * p_cell) <= 3 * sigma / np.sqrt(1000))


# -- beliefs -------------------------------------------------------------------

def test_belief_single_cell():
    ps = T.init_guided(ranked(30), GRID, np.random.default_rng(0), 100, 1)
    b = T.class_belief(ps, GRID)
    assert b.shape == (C,)
    nz = np.flatnonzero(b)
    np.testing.assert_array_equal(nz, np.arange(24, 36))      # all 12 bearings of location 2
    np.testing.assert_allclose(b[nz], 0.01)


def test_belief_max_pooling():
    ps = particles([0.5, 2.5], [0.5, 0.5], [0, 200], [0.7, 0.3])
    loc = T.location_belief(ps, GRID)
    assert loc[0] == 0.7 and loc[GRID.location_index(2.5, 0.5)] == 0.3
    assert np.count_nonzero(loc) == 2
    ps = particles([0.5, 0.6, 2.5], [0.5, 0.5, 0.5], [0, 0, 0], [0.5, 0.2, 0.3])
    assert T.location_belief(ps, GRID)[0] == 0.5       # max, not sum


def test_top1_by_weight_mass_with_tie_to_lower_id():
    ps = particles([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], [0, 0, 0], [0.3, 0.3, 0.4])
    assert T.top1_class(ps, GRID) == 0
    ps = particles([2.5, 0.5], [0.5, 0.5], [0, 0], [0.5, 0.5])
    assert T.top1_class(ps, GRID) == 0


def test_kernel_classes_match_grid():
    rng = np.random.default_rng(0)
    m = 5000
    ps = particles(rng.uniform(0, 8, m), rng.uniform(0, 8, m), rng.uniform(-720, 720, m))
    ps.pose[:, :10] = [[0, 8, 2, 4, 6, 8, 0, 2, 8, 0], [0, 8, 2, 4, 6, 0, 8, 6, 2, 4], [0, 30, 359.999, 360, 0, 90, 180, -30, 720, 330]]
    np.testing.assert_array_equal(ps.classes(GRID), GRID.classes(ps.x, ps.y, ps.theta))


def test_noise_free_convergence():
    assert convergence_trials(40) >= 38


def test_dump_particles(tmp_path):
    ps = particles([1, 2], [3, 4], [5, 6], [0.25, 0.75])
    path = tmp_path / "p.jsonl"
    T.dump_particles(ps, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows == [{"x": 1.0, "y": 3.0, "theta": 5.0, "w": 0.25}, {"x": 2.0, "y": 4.0, "theta": 6.0, "w": 0.75}]
