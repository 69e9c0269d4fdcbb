"""Particle filter over (x, y, theta) poses driven by reciprocal-rank observations."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .embedder import N_BEARINGS, PlaceClassGrid, top_classes

ROTATE_LEFT, ROTATE_RIGHT, FORWARD = 0, 1, 2
ACTIONS = (ROTATE_LEFT, ROTATE_RIGHT, FORWARD)
ACTION_NAMES = ("rotate_left", "rotate_right", "forward")

ROTATE_STEP = 30.0   # deg, one bearing bin
FORWARD_STEP = 0.5   # m
SIGMA_XY = 0.1
SIGMA_THETA = 5.0
LIKELIHOOD_FLOOR = 1e-6
N_PARTICLES = 5000
N_GUIDE = 3


@dataclass
class ParticleSet:
    pose: np.ndarray   # (3, M): x (m), y (m), theta (deg)
    w: np.ndarray      # (M,)

    @classmethod
    def from_arrays(cls, x, y, theta, w) -> "ParticleSet":
        return cls(np.stack([np.asarray(x, float), np.asarray(y, float), np.asarray(theta, float)]),
                   np.asarray(w, dtype=np.float64))

    @property
    def x(self) -> np.ndarray:
        return self.pose[0]

    @property
    def y(self) -> np.ndarray:
        return self.pose[1]

    @property
    def theta(self) -> np.ndarray:
        return self.pose[2]

    def __len__(self) -> int:
        return len(self.w)

    def classes(self, grid: PlaceClassGrid) -> np.ndarray:
        return _classes(self.pose, *_grid_args(grid))

    def effective_size(self) -> float:
        return 1.0 / float(np.dot(self.w, self.w))


def nominal_motion(x, y, theta, action: int):
    """Noise-free motion; theta=0 points along +x, positive angles turn left."""
    if action == ROTATE_LEFT:
        return x, y, np.mod(theta + ROTATE_STEP, 360.0)
    if action == ROTATE_RIGHT:
        return x, y, np.mod(theta - ROTATE_STEP, 360.0)
    if action == FORWARD:
        rad = np.deg2rad(theta)
        return x + FORWARD_STEP * np.cos(rad), y + FORWARD_STEP * np.sin(rad), theta
    raise ValueError(f"unknown action {action!r}")


# -- per-particle kernels ---------------------------------------------------------
# Same arithmetic as PlaceClassGrid.classes; fused loops keep M=5000 cheap.

def _grid_args(grid: PlaceClassGrid):
    return grid.x_min, grid.y_min, 1.0 / grid.resolution, grid.n_x, grid.n_y


@njit(cache=True)
def _class_of(x, y, t, x_min, y_min, inv_res, n_x, n_y):
    cx = min(int((x - x_min) * inv_res), n_x - 1)
    cy = min(int((y - y_min) * inv_res), n_y - 1)
    ct = min(int((t - 360.0 * math.floor(t * (1.0 / 360.0))) * (1.0 / 30.0)), 11)
    return (cx * n_y + cy) * 12 + ct


@njit(cache=True)
def _classes(pose, x_min, y_min, inv_res, n_x, n_y):
    m = pose.shape[1]
    out = np.empty(m, np.int64)
    for i in range(m):
        out[i] = _class_of(pose[0, i], pose[1, i], pose[2, i], x_min, y_min, inv_res, n_x, n_y)
    return out


@njit(cache=True)
def _predict(pose, action, x_min, x_max, y_min, y_max, sigma_xy, sigma_theta, rng):
    m = pose.shape[1]
    out = np.empty((3, m))
    for i in range(m):
        x, y, t = pose[0, i], pose[1, i], pose[2, i]
        if action == 2:
            r = t * (math.pi / 180.0)
            x += 0.5 * math.cos(r)
            y += 0.5 * math.sin(r)
            if sigma_xy > 0:
                x += sigma_xy * rng.standard_normal()
                y += sigma_xy * rng.standard_normal()
            x = min(max(x, x_min), x_max)
            y = min(max(y, y_min), y_max)
        else:
            t += 30.0 if action == 0 else -30.0
            if sigma_theta > 0:
                t += sigma_theta * rng.standard_normal()
            t -= 360.0 * math.floor(t * (1.0 / 360.0))
        out[0, i], out[1, i], out[2, i] = x, y, t
    return out


@njit(cache=True)
def _reweight(pose, w, rank_state, floor, x_min, y_min, inv_res, n_x, n_y):
    m = pose.shape[1]
    out = np.empty(m)
    total = 0.0
    for i in range(m):
        c = _class_of(pose[0, i], pose[1, i], pose[2, i], x_min, y_min, inv_res, n_x, n_y)
        out[i] = w[i] * (rank_state[c] + floor)
        total += out[i]
    inv = 1.0 / total
    sq = 0.0
    for i in range(m):
        out[i] *= inv
        sq += out[i] * out[i]
    return out, 1.0 / sq


@njit(cache=True)
def _fill_cells(lo, hi, counts, rng):
    m = counts.sum()
    out = np.empty((3, m))
    i = 0
    for c in range(len(counts)):
        for _ in range(counts[c]):
            for d in range(3):
                out[d, i] = lo[c, d] + (hi[c, d] - lo[c, d]) * rng.random()
            i += 1
    return out


@njit(cache=True)
def _systematic(w, u):
    m = w.shape[0]
    idx = np.empty(m, np.int64)
    cum = w[0]
    j = 0
    for i in range(m):
        pos = (u + i) / m
        while cum <= pos and j < m - 1:
            j += 1
            cum += w[j]
        idx[i] = j
    return idx


def init_guided(rank_state, grid: PlaceClassGrid, rng: np.random.Generator,
                n_particles: int = N_PARTICLES, k: int = N_GUIDE) -> ParticleSet:
    """Spread particles uniformly over the cells of the k best-ranked classes.

    Each class gets n_particles // k particles; the remainder goes to the top class.
    """
    if n_particles <= 0:
        raise ValueError("need at least one particle")
    if not 1 <= k <= grid.n_classes:
        raise ValueError(f"k={k} outside 1..{grid.n_classes}")
    chosen = top_classes(rank_state, k)
    counts = np.full(k, n_particles // k)
    counts[0] += n_particles - counts.sum()
    bounds = np.array([grid.cell_bounds(c) for c in chosen], dtype=np.float64)  # (k, 3, 2)
    pose = _fill_cells(np.ascontiguousarray(bounds[:, :, 0]), np.ascontiguousarray(bounds[:, :, 1]),
                       counts.astype(np.int64), rng)
    return ParticleSet(pose, np.full(n_particles, 1.0 / n_particles))


def predict(ps: ParticleSet, action: int, grid: PlaceClassGrid, rng: np.random.Generator,
            sigma_xy: float = SIGMA_XY, sigma_theta: float = SIGMA_THETA) -> ParticleSet:
    """Move every particle by the action, clamped to the workspace.

    Forward moves get Gaussian position noise (sigma_xy per axis), rotations
    get Gaussian heading noise (sigma_theta).
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    pose = _predict(ps.pose, action, grid.x_min, grid.x_max, grid.y_min, grid.y_max,
                    float(sigma_xy), float(sigma_theta), rng)
    return ParticleSet(pose, ps.w.copy())


def systematic_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Low-variance resampling: M evenly spaced pointers sharing one random offset."""
    m = len(ps)
    idx = _systematic(ps.w / ps.w.sum(), rng.random())
    return ParticleSet(np.take(ps.pose, idx, axis=1), np.full(m, 1.0 / m))


def update(ps: ParticleSet, rank_state, grid: PlaceClassGrid, rng: np.random.Generator,
           floor: float = LIKELIHOOD_FLOOR, resample: bool = True) -> ParticleSet:
    """Weight each particle by the rank-state value of its class, then renormalize.

    Systematic resampling kicks in when the effective sample size drops below M/2.
    """
    w, ess = _reweight(ps.pose, ps.w, np.asarray(rank_state, dtype=np.float64), float(floor),
                       *_grid_args(grid))
    out = ParticleSet(ps.pose, w)
    if resample and ess < len(out) / 2:
        out = systematic_resample(out, rng)
    return out


def location_belief(ps: ParticleSet, grid: PlaceClassGrid) -> np.ndarray:
    """Max particle weight per location cell, bearing ignored; empty cells are 0."""
    loc = grid.location_index(ps.x, ps.y)
    belief = np.zeros(grid.n_locations)
    np.maximum.at(belief, loc, ps.w)
    return belief


def class_belief(ps: ParticleSet, grid: PlaceClassGrid) -> np.ndarray:
    """Location belief broadcast to every bearing class of that location (length C)."""
    return np.repeat(location_belief(ps, grid), N_BEARINGS)


def top1_class(ps: ParticleSet, grid: PlaceClassGrid) -> int:
    """Full (x, y, theta) class holding the most particle weight; ties to the lower id."""
    mass = np.bincount(ps.classes(grid), weights=ps.w, minlength=grid.n_classes)
    return int(np.argmax(mass))


def dump_particles(ps: ParticleSet, path) -> None:
    with open(path, "w") as fh:
        for (x, y, t), w in zip(ps.pose.T, ps.w):
            fh.write(json.dumps({"x": float(x), "y": float(y), "theta": float(t), "w": float(w)}) + "\n")
