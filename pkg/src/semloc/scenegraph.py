"""Semantic scene graphs built from labeled bounding-box regions.

A region is a meta-class label plus an axis-aligned box in a 512x512 image.
Regions that are too small are dropped, the survivors become nodes with a
discrete (meta, size, location) feature, and nodes whose boxes overlap or lie
within 20 px of each other are joined by an edge.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

IMAGE_SIZE = 512
MIN_REGION_AREA = 5000
SIZE_UNIT = IMAGE_SIZE * IMAGE_SIZE // 16  # 16384 px
EDGE_DISTANCE = 20.0

META_CLASSES = (
    "wall", "floor", "ceiling", "bed", "door",
    "table", "sofa", "refrigerator", "TV", "Other",
)
N_META = len(META_CLASSES)
N_SIZE = 3
N_LOC = 9
N_FEATURES = N_META * N_SIZE * N_LOC  # 270


class SceneFormatError(ValueError):
    """Raised when a scene record cannot be parsed."""


@dataclass(frozen=True)
class SemanticRegion:
    label: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if not 0 <= self.label < N_META:
            raise ValueError(f"label {self.label} outside 0..{N_META - 1}")
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 <= x1 <= IMAGE_SIZE and 0 <= y0 <= y1 <= IMAGE_SIZE):
            raise ValueError(f"bbox {self.bbox} not inside the {IMAGE_SIZE}px image")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2, (y0 + y1) / 2


@dataclass(frozen=True)
class SceneGraph:
    """Node features are packed one-hot indices; edges are sorted (i, j) with i < j."""

    nodes: tuple[int, ...] = ()
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        n = len(self.nodes)
        for f in self.nodes:
            if not 0 <= f < N_FEATURES:
                raise ValueError(f"node feature {f} outside 0..{N_FEATURES - 1}")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"invalid edge ({i}, {j}) for {n} nodes")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def pack_feature(meta: int, size: int, loc: int) -> int:
    return meta * (N_SIZE * N_LOC) + size * N_LOC + loc


def unpack_feature(index: int) -> tuple[int, int, int]:
    meta, rest = divmod(index, N_SIZE * N_LOC)
    size, loc = divmod(rest, N_LOC)
    return meta, size, loc


def _area(bbox) -> float:
    x0, y0, x1, y1 = bbox
    return (x1 - x0) * (y1 - y0)


def filter_regions(regions: Sequence[SemanticRegion]) -> list[SemanticRegion]:
    """Drop regions whose box area is below MIN_REGION_AREA; keep order."""
    return [r for r in regions if r.area >= MIN_REGION_AREA]


def size_word(bbox) -> int:
    area = _area(bbox)
    if area < SIZE_UNIT:
        return 0
    if area < 6 * SIZE_UNIT:
        return 1
    return 2


def _grid_index(coord: float) -> int:
    # number of cell boundaries strictly below coord; a center exactly on a
    # boundary falls into the lower cell
    return sum(3 * coord > IMAGE_SIZE * k for k in (1, 2))


def location_word(bbox) -> int:
    """Cell of the box center in a row-major 3x3 grid over the image."""
    x0, y0, x1, y1 = bbox
    col = _grid_index((x0 + x1) / 2)
    row = _grid_index((y0 + y1) / 2)
    return row * 3 + col


def box_distance(a, b) -> float:
    """Minimum Euclidean distance between two axis-aligned boxes (0 if they touch)."""
    dx = max(0.0, b[0] - a[2], a[0] - b[2])
    dy = max(0.0, b[1] - a[3], a[1] - b[3])
    return math.hypot(dx, dy)


def connect_edges(regions: Sequence[SemanticRegion]) -> list[tuple[int, int]]:
    edges = []
    boxes = [r.bbox for r in regions]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if box_distance(boxes[i], boxes[j]) <= EDGE_DISTANCE:
                edges.append((i, j))
    return edges


def node_feature(region: SemanticRegion) -> int:
    return pack_feature(region.label, size_word(region.bbox), location_word(region.bbox))


def build_graph(regions: Sequence[SemanticRegion]) -> SceneGraph:
    kept = filter_regions(regions)
    return SceneGraph(
        nodes=tuple(node_feature(r) for r in kept),
        edges=tuple(connect_edges(kept)),
    )


# -- scene record files ----------------------------------------------------

def scene_record(pose, regions: Iterable[SemanticRegion], class_id: int) -> dict:
    return {
        "pose": [float(pose[0]), float(pose[1]), float(pose[2])],
        "regions": [{"label": r.label, "bbox": list(r.bbox)} for r in regions],
        "class_id": int(class_id),
    }


def parse_scene_record(obj, lineno: int = 0) -> tuple[tuple[float, float, float], list[SemanticRegion], int]:
    where = f"line {lineno}: "
    if not isinstance(obj, dict):
        raise SceneFormatError(where + "record must be an object")
    missing = {"pose", "regions", "class_id"} - obj.keys()
    if missing:
        raise SceneFormatError(where + f"missing fields {sorted(missing)}")
    pose = obj["pose"]
    if (not isinstance(pose, list) or len(pose) != 3
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pose)):
        raise SceneFormatError(where + "pose must be [x_m, y_m, theta_deg]")
    cid = obj["class_id"]
    if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0:
        raise SceneFormatError(where + "class_id must be a non-negative integer")
    if not isinstance(obj["regions"], list):
        raise SceneFormatError(where + "regions must be a list")
    regions = []
    for k, r in enumerate(obj["regions"]):
        try:
            label, bbox = r["label"], r["bbox"]
            if not isinstance(label, int) or isinstance(label, bool):
                raise TypeError("label must be an integer")
            if len(bbox) != 4:
                raise ValueError("bbox needs 4 numbers")
            regions.append(SemanticRegion(label, tuple(float(v) for v in bbox)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(where + f"region {k}: {exc}") from None
    return (float(pose[0]), float(pose[1]), float(pose[2])), regions, cid


def read_scenes(path) -> Iterator[tuple[tuple[float, float, float], list[SemanticRegion], int]]:
    """Yield (pose, regions, class_id) from a line-delimited JSON scene file."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {lineno}: {exc.msg}") from None
            yield parse_scene_record(obj, lineno)


def write_scenes(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            n += 1
    return n
