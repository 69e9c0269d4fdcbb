"""Procedural semantic world: rooms, furniture, a pinhole renderer and split sampling.

The world is a rectangular room with boundary walls, an optional partial
interior wall, and furniture with rectangular footprints. ``render`` projects
what a forward-facing camera would see into labeled 512x512 bounding boxes,
i.e. the same format a semantic segmentation step would produce.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .embedder import PlaceClassGrid, pose_to_class
from .scenegraph import IMAGE_SIZE, SemanticRegion, scene_record
from .tracker import FORWARD, nominal_motion

WALL, FLOOR, CEILING, BED, DOOR, TABLE, SOFA, FRIDGE, TV, OTHER = range(10)

FOCAL = IMAGE_SIZE / 2          # 90 deg horizontal field of view
CAMERA_HEIGHT = 1.2
CEILING_HEIGHT = 2.5
OBJECT_HEIGHTS = (0.5, 1.0, 2.0)
MAX_RANGE = 6.0
MIN_RANGE = 0.3
N_COLUMNS = 32
CLEARANCE = 0.15

TXY_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
TTHETA_GRID = (10, 30, 50, 70, 90)


@dataclass(frozen=True)
class WorldObject:
    label: int
    center: tuple[float, float]
    half: tuple[float, float]
    height: int  # index into OBJECT_HEIGHTS

    def corners(self) -> np.ndarray:
        cx, cy = self.center
        hx, hy = self.half
        return np.array([[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]])


@dataclass
class WorldModel:
    seed: int
    bounds: tuple[float, float, float, float]
    walls: np.ndarray                  # (W, 4) segments x0, y0, x1, y1; boundary first
    objects: list[WorldObject] = field(default_factory=list)

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
        x_min, x_max, y_min, y_max = self.bounds
        for ob in self.objects:
            c = ob.corners()
            if c[:, 0].min() < x_min or c[:, 0].max() > x_max or c[:, 1].min() < y_min or c[:, 1].max() > y_max:
                raise ValueError(f"object {ob} leaves the workspace")
        self._interior = self.walls[4:]
        self._labels = np.array([o.label for o in self.objects], dtype=np.int64)
        self._centers = np.array([o.center for o in self.objects], dtype=np.float64).reshape(-1, 2)
        self._corners = np.array([o.corners() for o in self.objects]).reshape(-1, 4, 2)
        self._tops = np.array([OBJECT_HEIGHTS[o.height] for o in self.objects]).reshape(-1)
        self._boxes = np.array([[o.center[0] - o.half[0], o.center[1] - o.half[1],
                                 o.center[0] + o.half[0], o.center[1] + o.half[1]] for o in self.objects]).reshape(-1, 4)
        self._box_list = [tuple(map(float, b)) for b in self._boxes]
        self._seg_list = [(float(ax), float(ay), float(bx - ax), float(by - ay),
                           float((bx - ax) ** 2 + (by - ay) ** 2)) for ax, ay, bx, by in self._interior]

    @property
    def grid(self) -> PlaceClassGrid:
        return PlaceClassGrid(*self.bounds)

    def in_bounds(self, x, y) -> bool:
        x_min, x_max, y_min, y_max = self.bounds
        return x_min <= x <= x_max and y_min <= y <= y_max

    def is_free(self, x, y) -> np.ndarray:
        """Vectorized: inside the room, off furniture, away from interior walls."""
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        x_min, x_max, y_min, y_max = self.bounds
        ok = (x >= x_min + CLEARANCE) & (x <= x_max - CLEARANCE) & (y >= y_min + CLEARANCE) & (y <= y_max - CLEARANCE)
        for bx0, by0, bx1, by1 in self._boxes:
            ok &= ~((x > bx0 - CLEARANCE) & (x < bx1 + CLEARANCE) & (y > by0 - CLEARANCE) & (y < by1 + CLEARANCE))
        for seg in self._interior:
            ok &= _point_segment_distance(x, y, seg) >= CLEARANCE
        return ok

    def point_free(self, x: float, y: float) -> bool:
        """Scalar version of :meth:`is_free` for the motion model's single query."""
        x_min, x_max, y_min, y_max = self.bounds
        c = CLEARANCE
        if not (x_min + c <= x <= x_max - c and y_min + c <= y <= y_max - c):
            return False
        for bx0, by0, bx1, by1 in self._box_list:
            if bx0 - c < x < bx1 + c and by0 - c < y < by1 + c:
                return False
        for ax, ay, ex, ey, ee in self._seg_list:
            t = min(max(((x - ax) * ex + (y - ay) * ey) / ee, 0.0), 1.0)
            if math.hypot(x - (ax + t * ex), y - (ay + t * ey)) < c:
                return False
        return True


def _point_segment_distance(x, y, seg):
    ax, ay, bx, by = seg
    ex, ey = bx - ax, by - ay
    t = np.clip(((x - ax) * ex + (y - ay) * ey) / (ex * ex + ey * ey), 0.0, 1.0)
    return np.hypot(x - (ax + t * ex), y - (ay + t * ey))


def _segments_cross(p, q, seg) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    a, b = seg[:2], seg[2:]
    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0)


def cast_rays(origin, angles_deg, walls: np.ndarray):
    """Distance to the first wall along each ray and the index of that wall."""
    ang = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    dx, dy = np.cos(ang)[:, None], np.sin(ang)[:, None]
    ax, ay = walls[:, 0][None, :], walls[:, 1][None, :]
    ex, ey = (walls[:, 2] - walls[:, 0])[None, :], (walls[:, 3] - walls[:, 1])[None, :]
    px, py = ax - origin[0], ay - origin[1]
    denom = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (px * ey - py * ex) / denom
        u = (px * dy - py * dx) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= -1e-12) & (u <= 1 + 1e-12)
    t = np.where(hit, t, np.inf)
    idx = np.argmin(t, axis=1)
    return t[np.arange(len(ang)), idx], idx


def render(world: WorldModel, pose) -> list[SemanticRegion]:
    """Labeled boxes seen from ``pose`` (x m, y m, theta deg); a pure function of world and pose."""
    x, y, theta = pose
    if not world.in_bounds(x, y):
        raise ValueError(f"pose ({x}, {y}) outside the workspace {world.bounds}")
    rad = math.radians(theta)
    head = np.array([math.cos(rad), math.sin(rad)])
    right = np.array([math.sin(rad), -math.cos(rad)])

    # furniture candidates: in front, inside the 90 deg cone, within range
    d = world._centers - (x, y)
    dist_c = np.hypot(d[:, 0], d[:, 1])
    depth_c = d @ head
    lat_c = d @ right
    cand = np.flatnonzero((depth_c > 0) & (np.abs(lat_c) <= depth_c)
                          & (dist_c <= MAX_RANGE) & (dist_c >= MIN_RANGE))

    # one ray per image column plus one toward each candidate's center
    col_w = IMAGE_SIZE / N_COLUMNS
    u = (np.arange(N_COLUMNS) + 0.5) * col_w
    phi = np.rad2deg(np.arctan((u - FOCAL) / FOCAL))  # positive = right of heading
    obj_ang = np.rad2deg(np.arctan2(d[cand, 1], d[cand, 0]))
    hit, seg = cast_rays((x, y), np.concatenate([theta - phi, obj_ang]), world.walls)

    depth = hit[:N_COLUMNS] * np.cos(np.deg2rad(phi))
    v_top = np.clip(FOCAL - FOCAL * (CEILING_HEIGHT - CAMERA_HEIGHT) / depth, 0, IMAGE_SIZE)
    v_bot = np.clip(FOCAL + FOCAL * CAMERA_HEIGHT / depth, 0, IMAGE_SIZE)
    regions = [
        SemanticRegion(CEILING, (0.0, 0.0, float(IMAGE_SIZE), float(v_top.max()))),
        SemanticRegion(FLOOR, (0.0, float(v_bot.min()), float(IMAGE_SIZE), float(IMAGE_SIZE))),
    ]
    start = 0
    for j in range(1, N_COLUMNS + 1):
        if j == N_COLUMNS or seg[j] != seg[start]:
            regions.append(SemanticRegion(WALL, (
                start * col_w, float(v_top[start:j].min()), j * col_w, float(v_bot[start:j].max()))))
            start = j

    if len(cand) == 0:
        return regions
    visible = hit[N_COLUMNS:] >= dist_c[cand] - 1e-6
    cand = cand[visible]
    rel = world._corners[cand] - (x, y)            # (m, 4, 2)
    depths = rel @ head
    near = depths.min(axis=1)
    keep = near > 0.05                             # a corner at or behind the camera plane
    with np.errstate(divide="ignore", invalid="ignore"):
        us = FOCAL + FOCAL * (rel @ right) / depths
    u0, u1 = us.min(axis=1), us.max(axis=1)
    keep &= ~((u0 < 0) & (u1 > IMAGE_SIZE))        # wider than the image
    top = FOCAL - FOCAL * (world._tops[cand] - CAMERA_HEIGHT) / near
    bot = FOCAL + FOCAL * CAMERA_HEIGHT / near
    boxes = np.clip(np.stack([u0, top, u1, bot], axis=1), 0, IMAGE_SIZE)
    keep &= (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
    for i in np.flatnonzero(keep):
        regions.append(SemanticRegion(int(world._labels[cand[i]]), tuple(boxes[i].tolist())))
    return regions


def step(world: WorldModel, pose, action: int):
    """Nominal motion; a blocked forward move leaves the pose unchanged."""
    x, y, theta = pose
    nx, ny, nt = nominal_motion(x, y, theta, action)
    nx, ny, nt = float(nx), float(ny), float(nt)
    if action == FORWARD:
        if not world.point_free(nx, ny):
            return (x, y, theta)
        if any(_segments_cross((x, y), (nx, ny), s) for s in world._interior):
            return (x, y, theta)
    return (nx, ny, nt)


# -- generation ---------------------------------------------------------------

_FURNITURE = {
    # label: (footprint half-extent ranges, height category)
    BED: (((0.9, 1.1), (0.7, 0.8)), 0),
    TABLE: (((0.4, 0.7), (0.3, 0.5)), 1),
    SOFA: (((0.8, 1.0), (0.35, 0.45)), 0),
    FRIDGE: (((0.3, 0.4), (0.3, 0.4)), 2),
}


def generate_world(seed: int, size: tuple[float, float] = (8.0, 8.0)) -> WorldModel:
    """Random furnished room fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    w, h = size
    walls = [[0, 0, w, 0], [w, 0, w, h], [w, h, 0, h], [0, h, 0, 0]]
    # one partial interior wall sticking out of a random side
    side = int(rng.integers(4))
    length = float(rng.uniform(2.0, 3.0))
    pos = float(rng.uniform(0.35, 0.65))
    if side == 0:
        walls.append([pos * w, 0, pos * w, length])
    elif side == 1:
        walls.append([w, pos * h, w - length, pos * h])
    elif side == 2:
        walls.append([pos * w, h, pos * w, h - length])
    else:
        walls.append([0, pos * h, length, pos * h])
    interior = np.array(walls[4:], dtype=float)

    objects: list[WorldObject] = []
    boxes: list[tuple[float, float, float, float]] = []

    def fits(cx, cy, hx, hy, gap=0.5):
        if cx - hx < 0 or cx + hx > w or cy - hy < 0 or cy + hy > h:
            return False
        for bx0, by0, bx1, by1 in boxes:
            if cx - hx < bx1 + gap and cx + hx > bx0 - gap and cy - hy < by1 + gap and cy + hy > by0 - gap:
                return False
        for seg in interior:
            # sample the footprint outline against the wall
            xs = np.linspace(cx - hx, cx + hx, 7)
            ys = np.linspace(cy - hy, cy + hy, 7)
            gx, gy = np.meshgrid(xs, ys)
            if _point_segment_distance(gx.ravel(), gy.ravel(), seg).min() < 0.4:
                return False
        return True

    def place(label, half_ranges, height, on_wall=False, tries=200):
        for _ in range(tries):
            hx = float(rng.uniform(*half_ranges[0]))
            hy = float(rng.uniform(*half_ranges[1]))
            if on_wall:
                s = int(rng.integers(4))
                t = float(rng.uniform(0.15, 0.85))
                if s in (0, 2):
                    cx, cy, hx, hy = t * w, (hy if s == 0 else h - hy), hx, hy
                else:
                    hx, hy = hy, hx
                    cx, cy = (hx if s == 3 else w - hx), t * h
            else:
                cx = float(rng.uniform(hx + 0.6, w - hx - 0.6))
                cy = float(rng.uniform(hy + 0.6, h - hy - 0.6))
            if fits(cx, cy, hx, hy):
                objects.append(WorldObject(label, (cx, cy), (hx, hy), height))
                boxes.append((cx - hx, cy - hy, cx + hx, cy + hy))
                return True
        return False

    for _ in range(2):
        place(DOOR, ((0.4, 0.5), (0.05, 0.05)), 2, on_wall=True)
    place(TV, ((0.5, 0.7), (0.05, 0.05)), 1, on_wall=True)
    for label in (BED, TABLE, TABLE, SOFA, FRIDGE):
        half, height = _FURNITURE[label]
        place(label, half, height)
    for _ in range(3):
        place(OTHER, ((0.2, 0.35), (0.2, 0.35)), int(rng.integers(3)))
    return WorldModel(seed, (0.0, float(w), 0.0, float(h)), np.array(walls, dtype=float), objects)


def sample_free_poses(world: WorldModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (x, y, theta) poses over free space, shape (n, 3)."""
    x_min, x_max, y_min, y_max = world.bounds
    out = np.empty((0, 3))
    while len(out) < n:
        m = max(64, 2 * (n - len(out)))
        xs = rng.uniform(x_min, x_max, m)
        ys = rng.uniform(y_min, y_max, m)
        ts = rng.uniform(0.0, 360.0, m)
        keep = world.is_free(xs, ys)
        out = np.concatenate([out, np.stack([xs[keep], ys[keep], ts[keep]], axis=1)])
    return out[:n]


# -- domain-gap splits ----------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    t_xy: float
    t_theta: float
    n_test: int = 100
    n_train: int = 500
    n_validation: int = 10

    def __post_init__(self):
        if not any(math.isclose(self.t_xy, v) for v in TXY_GRID):
            raise ValueError(f"t_xy={self.t_xy} not in {TXY_GRID}")
        if not any(math.isclose(self.t_theta, v) for v in TTHETA_GRID):
            raise ValueError(f"t_theta={self.t_theta} not in {TTHETA_GRID}")


@dataclass
class Splits:
    t_xy: float
    t_theta: float
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray


class SplitSamplingError(RuntimeError):
    pass


def angle_difference(a, b):
    """Absolute bearing difference wrapped to [0, 180] degrees."""
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + 180.0, 360.0) - 180.0)


def gap_satisfied(train: np.ndarray, test: np.ndarray, t_xy: float, t_theta: float) -> np.ndarray:
    """Both gap conditions against each train pose's location-nearest test pose."""
    dist, nn = cKDTree(test[:, :2]).query(train[:, :2])
    return (dist > t_xy) & (angle_difference(train[:, 2], test[nn, 2]) > t_theta)


def sample_splits(world: WorldModel, spec: SplitSpec, rng: np.random.Generator,
                  max_draws: int = 5_000_000) -> Splits:
    """Uniform test (and validation) poses; train poses by rejection against the gap."""
    test = sample_free_poses(world, spec.n_test, rng)
    validation = sample_free_poses(world, spec.n_validation, rng)
    tree = cKDTree(test[:, :2])
    accepted = []
    n_acc = drawn = 0
    while n_acc < spec.n_train:
        if drawn >= max_draws:
            raise SplitSamplingError(
                f"only {n_acc}/{spec.n_train} train poses after {drawn} draws "
                f"(T_xy={spec.t_xy}, T_theta={spec.t_theta}); workspace too small for this gap")
        cand = sample_free_poses(world, 20_000, rng)
        drawn += len(cand)
        dist, nn = tree.query(cand[:, :2])
        ok = (dist > spec.t_xy) & (angle_difference(cand[:, 2], test[nn, 2]) > spec.t_theta)
        accepted.append(cand[ok])
        n_acc += int(ok.sum())
    train = np.concatenate(accepted)[:spec.n_train]
    return Splits(spec.t_xy, spec.t_theta, train, test, validation)


# -- files ---------------------------------------------------------------------

def world_to_dict(world: WorldModel) -> dict:
    return {
        "seed": world.seed,
        "bounds": list(world.bounds),
        "walls": world.walls.tolist(),
        "objects": [{"label": o.label, "center": list(o.center), "half": list(o.half), "height": o.height}
                    for o in world.objects],
    }


def world_from_dict(d: dict) -> WorldModel:
    try:
        objects = [WorldObject(int(o["label"]), tuple(o["center"]), tuple(o["half"]), int(o["height"]))
                   for o in d["objects"]]
        return WorldModel(int(d["seed"]), tuple(float(v) for v in d["bounds"]), np.array(d["walls"]), objects)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed world description: {exc}") from None


def save_world(world: WorldModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh, indent=1)


def load_world(path) -> WorldModel:
    with open(path) as fh:
        return world_from_dict(json.load(fh))


def save_splits(splits: Splits, path) -> None:
    with open(path, "w") as fh:
        json.dump({"t_xy": splits.t_xy, "t_theta": splits.t_theta,
                   "train": splits.train.tolist(), "test": splits.test.tolist(),
                   "validation": splits.validation.tolist()}, fh)


def load_splits(path) -> Splits:
    with open(path) as fh:
        d = json.load(fh)
    return Splits(d["t_xy"], d["t_theta"], *(np.asarray(d[k], dtype=np.float64).reshape(-1, 3)
                                              for k in ("train", "test", "validation")))


def generate_scenes(world: WorldModel, n: int, rng: np.random.Generator):
    """Scene records at uniform free poses, labeled with their place class."""
    grid = world.grid
    for pose in sample_free_poses(world, n, rng):
        p = tuple(float(v) for v in pose)
        yield scene_record(p, render(world, p), pose_to_class(p, grid))
