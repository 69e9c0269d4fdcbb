"""Graph convolutional place classifier and reciprocal-rank state vectors.

The workspace (x, y, theta) is cut into 2 m x 2 m x 30 deg place classes.
A two-layer GCN with mean readout maps a scene graph to one logit per class;
the logits are then turned into a vector of reciprocal ranks, which is what
the tracker and the planner consume.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .scenegraph import N_FEATURES, SceneGraph

LOCATION_RESOLUTION = 2.0
BEARING_RESOLUTION = 30.0
N_BEARINGS = 12
HIDDEN = 64


@dataclass(frozen=True)
class PlaceClassGrid:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: float = LOCATION_RESOLUTION

    @property
    def n_x(self) -> int:
        return max(1, math.ceil((self.x_max - self.x_min) / self.resolution))

    @property
    def n_y(self) -> int:
        return max(1, math.ceil((self.y_max - self.y_min) / self.resolution))

    @property
    def n_locations(self) -> int:
        return self.n_x * self.n_y

    @property
    def n_classes(self) -> int:
        return self.n_locations * N_BEARINGS

    def contains(self, x, y) -> np.ndarray:
        x, y = np.asarray(x), np.asarray(y)
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    def location_index(self, x, y):
        """Location-only cell (bearing marginalized) of points inside the workspace."""
        inv = 1.0 / self.resolution
        cx = np.minimum(((np.asarray(x) - self.x_min) * inv).astype(np.int64), self.n_x - 1)
        cy = np.minimum(((np.asarray(y) - self.y_min) * inv).astype(np.int64), self.n_y - 1)
        return cx * self.n_y + cy

    def classes(self, x, y, theta) -> np.ndarray:
        """Vectorized pose -> class id; poses are assumed in bounds."""
        theta = np.asarray(theta)
        ct = ((theta - 360.0 * np.floor(theta * (1.0 / 360.0))) * (1.0 / BEARING_RESOLUTION)).astype(np.int64)
        return self.location_index(x, y) * N_BEARINGS + np.minimum(ct, N_BEARINGS - 1)

    def cell_bounds(self, class_id: int):
        """((x_lo, x_hi), (y_lo, y_hi), (theta_lo, theta_hi)) of a class, clipped to the workspace."""
        loc, ct = divmod(int(class_id), N_BEARINGS)
        cx, cy = divmod(loc, self.n_y)
        x_lo = self.x_min + cx * self.resolution
        y_lo = self.y_min + cy * self.resolution
        return (
            (x_lo, min(x_lo + self.resolution, self.x_max)),
            (y_lo, min(y_lo + self.resolution, self.y_max)),
            (ct * BEARING_RESOLUTION, (ct + 1) * BEARING_RESOLUTION),
        )


def pose_to_class(pose, grid: PlaceClassGrid) -> int:
    x, y, theta = pose
    if not bool(grid.contains(x, y)):
        raise ValueError(f"pose ({x}, {y}) outside workspace "
                         f"[{grid.x_min}, {grid.x_max}] x [{grid.y_min}, {grid.y_max}]")
    return int(grid.classes(x, y, theta))


@dataclass
class GcnModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3")

    @classmethod
    def init(cls, n_classes: int, hidden: int = HIDDEN, seed: int = 0) -> "GcnModel":
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        return cls(
            glorot(N_FEATURES, hidden), np.zeros(hidden),
            glorot(hidden, hidden), np.zeros(hidden),
            glorot(hidden, n_classes), np.zeros(n_classes),
        )

    @property
    def n_classes(self) -> int:
        return self.w3.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "GcnModel":
        return GcnModel(**{k: v.copy() for k, v in self.params().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


def normalized_adjacency(graph: SceneGraph) -> np.ndarray:
    """Dense D^-1/2 (A + I) D^-1/2 of a single graph."""
    n = graph.n_nodes
    a = np.eye(n)
    for i, j in graph.edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_forward(graph: SceneGraph, model: GcnModel, n_classes: int | None = None) -> np.ndarray:
    """Class logits for one scene graph."""
    if n_classes is not None and model.n_classes != n_classes:
        raise ValueError(f"model predicts {model.n_classes} classes, grid has {n_classes}")
    if graph.n_nodes == 0:
        return model.b3.copy()
    a = normalized_adjacency(graph)
    h1 = np.maximum(a @ model.w1[list(graph.nodes)] + model.b1, 0.0)
    h2 = a @ (h1 @ model.w2) + model.b2
    return h2.mean(axis=0) @ model.w3 + model.b3


# -- batched training -------------------------------------------------------

@dataclass(frozen=True)
class _Packed:
    feats: np.ndarray
    cols: np.ndarray      # row-grouped neighbor columns of A + I
    vals: np.ndarray      # matching D^-1/2 (A + I) D^-1/2 entries
    counts: np.ndarray    # entries per row


def _pack(graph: SceneGraph) -> _Packed:
    n = graph.n_nodes
    nbrs = [[i] for i in range(n)]
    for i, j in graph.edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    counts = np.array([len(v) for v in nbrs], dtype=np.int64)
    rows = np.repeat(np.arange(n), counts)
    cols = np.array([c for v in nbrs for c in v], dtype=np.int64)
    vals = 1.0 / np.sqrt(counts[rows] * counts[cols]) if n else np.zeros(0)
    return _Packed(np.array(graph.nodes, dtype=np.int64), cols, vals, counts)


class GraphBatch:
    """Block-diagonal packing of several graphs for one forward/backward pass.

    The adjacency is kept as CSR arrays assembled straight from the per-graph
    row-grouped entries, which keeps batch construction cheap.
    """

    def __init__(self, graphs: Sequence[SceneGraph], packed: Sequence[_Packed] | None = None):
        if packed is None:
            packed = [_pack(g) for g in graphs]
        sizes = np.array([len(p.feats) for p in packed], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offsets[-1])
        self.n_graphs = len(packed)
        self.n_nodes = n
        self.feats = np.concatenate([p.feats for p in packed]) if n else np.zeros(0, np.int64)
        if n:
            self.indptr = np.concatenate([[0], np.cumsum(np.concatenate([p.counts for p in packed]))])
            self.cols = np.concatenate([p.cols + o for p, o in zip(packed, offsets)])
            self.vals = np.concatenate([p.vals for p in packed])
        else:
            self.indptr, self.cols, self.vals = np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros(0)
        owner = np.repeat(np.arange(self.n_graphs), sizes)
        self.pool = np.zeros((self.n_graphs, n))
        self.pool[owner, np.arange(n)] = 1.0 / sizes[owner]

    def propagate(self, h: np.ndarray) -> np.ndarray:
        """Normalized adjacency times h (symmetric, so it is also the transpose product)."""
        return _csr_matmul(self.indptr, self.cols, self.vals, np.ascontiguousarray(h))

    def readout(self, h: np.ndarray) -> np.ndarray:
        return self.pool @ h

    def readout_grad(self, dg: np.ndarray) -> np.ndarray:
        return self.pool.T @ dg


@njit(cache=True)
def _csr_matmul(indptr, cols, vals, h):
    out = np.zeros((indptr.shape[0] - 1, h.shape[1]))
    for r in range(indptr.shape[0] - 1):
        for p in range(indptr[r], indptr[r + 1]):
            c, v = cols[p], vals[p]
            for f in range(h.shape[1]):
                out[r, f] += v * h[c, f]
    return out


def batch_forward(model: GcnModel, batch: GraphBatch):
    z1 = batch.propagate(model.w1[batch.feats]) + model.b1
    h1 = np.maximum(z1, 0.0)
    h2 = batch.propagate(h1 @ model.w2) + model.b2
    g = batch.readout(h2)
    logits = g @ model.w3 + model.b3
    return logits, (z1, h1, g)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss and d(loss)/d(logits), max-subtracted for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@njit(cache=True)
def _scatter_rows(feats, rows, n_features):
    """Sum of ``rows`` grouped by node feature: the one-hot input layer's weight gradient."""
    out = np.zeros((n_features, rows.shape[1]))
    for i in range(feats.shape[0]):
        for f in range(rows.shape[1]):
            out[feats[i], f] += rows[i, f]
    return out


def loss_and_grad(model: GcnModel, batch: GraphBatch, labels: np.ndarray):
    logits, (z1, h1, g) = batch_forward(model, batch)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = {
        "w3": g.T @ dlogits,
        "b3": dlogits.sum(axis=0),
    }
    dh2 = batch.readout_grad(dlogits @ model.w3.T)
    grads["b2"] = dh2.sum(axis=0)
    dm2 = batch.propagate(dh2)
    grads["w2"] = h1.T @ dm2
    dz1 = (dm2 @ model.w2.T) * (z1 > 0)
    grads["b1"] = dz1.sum(axis=0)
    dm1 = batch.propagate(dz1)
    grads["w1"] = _scatter_rows(batch.feats, dm1, model.w1.shape[0])
    return loss, grads


class Adam:
    """Adam over one flat parameter vector."""

    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        _adam_step(theta, grad, self.m, self.v, self.lr / (1 - self.beta1 ** self.t),
                   1.0 / (1 - self.beta2 ** self.t), self.beta1, self.beta2, self.eps)


@njit(cache=True)
def _adam_step(theta, grad, m, v, step, v_scale, beta1, beta2, eps):
    for i in range(theta.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        theta[i] -= step * m[i] / (math.sqrt(v[i] * v_scale) + eps)


def _flatten(model: GcnModel) -> tuple[np.ndarray, GcnModel]:
    """Copy a model into one contiguous vector; the returned model's arrays are views of it."""
    params = model.params()
    theta = np.concatenate([v.ravel() for v in params.values()])
    views, pos = {}, 0
    for k, v in params.items():
        views[k] = theta[pos:pos + v.size].reshape(v.shape)
        pos += v.size
    return theta, GcnModel(**views)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    hidden: int = HIDDEN
    seed: int = 0


@dataclass
class TrainResult:
    model: GcnModel
    train_accuracy: float
    losses: list[float] = field(default_factory=list)


def predict_classes(model: GcnModel, graphs: Sequence[SceneGraph], chunk: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(graphs), chunk):
        logits, _ = batch_forward(model, GraphBatch(graphs[s:s + chunk]))
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def train_gcn(dataset: Sequence[tuple[SceneGraph, int]], n_classes: int,
              config: TrainConfig | None = None, model: GcnModel | None = None) -> TrainResult:
    """Mini-batch Adam on mean softmax cross-entropy.

    Returns the trained model, the Top-1 accuracy on the training set after
    the last epoch, and the mean loss per epoch.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    graphs = [g for g, _ in dataset]
    labels = np.array([c for _, c in dataset], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")

    model = model if model is not None else GcnModel.init(n_classes, config.hidden, config.seed)
    if model.n_classes != n_classes:
        raise ValueError(f"model predicts {model.n_classes} classes, expected {n_classes}")
    theta, model = _flatten(model)
    opt = Adam(theta.size, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    packed = [_pack(g) for g in graphs]
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(graphs))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = GraphBatch([graphs[i] for i in idx], [packed[i] for i in idx])
            loss, grads = loss_and_grad(model, batch, labels[idx])
            opt.step(theta, np.concatenate([grads[k].ravel() for k in GcnModel.PARAMS]))
            total += loss * len(idx)
        losses.append(total / len(graphs))
    model = model.copy()
    acc = float(np.mean(predict_classes(model, graphs) == labels))
    return TrainResult(model, acc, losses)


# -- reciprocal ranks ---------------------------------------------------------

def scores_to_rank_state(scores) -> np.ndarray:
    """Element c is 1 / rank(c) under descending score, ties to the lower class id."""
    s = np.asarray(scores, dtype=np.float64)
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    order = np.lexsort((np.arange(len(s)), -s))
    state = np.empty(len(s))
    state[order] = 1.0 / np.arange(1, len(s) + 1)
    return state


def top_classes(rank_state, k: int) -> np.ndarray:
    """The k classes with the largest rank-state values, best first."""
    rs = np.asarray(rank_state)
    return np.lexsort((np.arange(len(rs)), -rs))[:k]


# -- model file -------------------------------------------------------------

MODEL_MAGIC = b"SEMLOCGCN\0"
MODEL_VERSION = 1


def save_model(model: GcnModel, path) -> None:
    arrays = [np.ascontiguousarray(v, dtype="<f4") for v in model.params().values()]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<III", MODEL_VERSION, model.n_classes, len(arrays)))
        for a in arrays:
            shape = a.shape if a.ndim == 2 else (1, a.shape[0])
            fh.write(struct.pack("<II", *shape))
        for a in arrays:
            fh.write(a.tobytes())


def load_model(path, n_classes: int | None = None) -> GcnModel:
    """Read a model file, rejecting bad magic, versions, shapes, truncation and trailing bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not a GCN model file")
    try:
        return _parse_model(data, path, n_classes)
    except struct.error:
        raise ValueError(f"{path}: truncated model file") from None


def _parse_model(data: bytes, path, n_classes: int | None) -> GcnModel:
    pos = len(MODEL_MAGIC)
    version, c, n_arrays = struct.unpack_from("<III", data, pos)
    pos += 12
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    if n_arrays != len(GcnModel.PARAMS):
        raise ValueError(f"{path}: expected {len(GcnModel.PARAMS)} arrays, found {n_arrays}")
    shapes = []
    for _ in range(n_arrays):
        shapes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    (r1, h), (_, hb1), (r2, c2), (_, hb2), (r3, c3), (_, cb3) = shapes
    if not (r1 == N_FEATURES and hb1 == h and r2 == h and c2 == h and hb2 == h
            and r3 == h and c3 == c and cb3 == c):
        raise ValueError(f"{path}: inconsistent layer shapes {shapes}")
    if n_classes is not None and c != n_classes:
        raise ValueError(f"{path}: model has {c} classes, expected {n_classes}")
    params = {}
    for name, (r, cols) in zip(GcnModel.PARAMS, shapes):
        n = r * cols
        if len(data) < pos + 4 * n:
            raise ValueError(f"{path}: truncated model file")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
        params[name] = arr.reshape(r, cols) if name.startswith("w") else arr
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in model file")
    return GcnModel(**params)
