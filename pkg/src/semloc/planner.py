"""Nearest-neighbor Q-learning over reciprocal-rank states.

Q values are stored only for experienced (state, action) pairs, kept in one
append-only collection per action. A query is answered by the stored value of
a revisited pair (state within ``tau`` of a record) or else by the mean of the
``k`` nearest records of the same action.

Because records are never deleted, a checkpoint only has to remember how many
records each action had and what their q values were at that moment; records
inserted later are simply not available (N/A) in the restored function.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

N_ACTIONS = 3
K_NEIGHBORS = 4
REVISIT_TAU = 1e-6


def epsilon_schedule(n: int) -> float:
    """Exploration rate for the n-th training episode (0-based)."""
    return 1.0 / (0.1 * (n + 1) + 1.0)


@njit(cache=True)
def _knn_extend(state, states, start, n, idx, d2, k):
    """Fold records ``start..n-1`` into a (d2, index)-sorted top-k list.

    Distances are summed in a fixed order per record, so a record's distance
    never depends on which batch it arrived in.
    """
    out_idx = np.empty(k, np.int64)
    out_d2 = np.empty(k)
    cnt = len(idx)
    out_idx[:cnt] = idx
    out_d2[:cnt] = d2
    dim = state.shape[0]
    for j in range(start, n):
        s = 0.0
        for t in range(dim):
            diff = states[j, t] - state[t]
            s += diff * diff
        if cnt == k and s >= out_d2[k - 1]:
            continue   # later records lose ties
        p = cnt if cnt < k else k - 1
        while p > 0 and out_d2[p - 1] > s:
            if p < k:
                out_idx[p] = out_idx[p - 1]
                out_d2[p] = out_d2[p - 1]
            p -= 1
        out_idx[p] = j
        out_d2[p] = s
        if cnt < k:
            cnt += 1
    return out_idx[:cnt], out_d2[:cnt]


@dataclass
class _Neighbors:
    n_seen: int
    idx: np.ndarray
    d2: np.ndarray


_NO_IDX = np.empty(0, np.int64)
_NO_D2 = np.empty(0)


def _merge(old: _Neighbors | None, states: np.ndarray, n: int, s: np.ndarray, k: int) -> _Neighbors:
    if old is None:
        idx, d2 = _knn_extend(s, states, 0, n, _NO_IDX, _NO_D2, k)
    elif old.n_seen == n:
        return old
    else:
        idx, d2 = _knn_extend(s, states, old.n_seen, n, old.idx, old.d2, k)
    return _Neighbors(n, idx, d2)


class _QFunction:
    """Shared k-NN estimation over per-action (states, q) prefixes.

    Neighbor lists are memoized per query state and only extended with the
    records appended since the last query, so repeated states are cheap.
    """

    k: int
    tau: float
    n_actions: int
    _memo: dict

    def _arrays(self, action: int) -> tuple[np.ndarray, np.ndarray, int]:
        raise NotImplementedError

    def _entry(self, state: np.ndarray) -> list:
        key = state.tobytes()
        entry = self._memo.get(key)
        if entry is None:
            entry = self._memo[key] = [None] * self.n_actions
        return entry

    def _lookup(self, entry: list, state: np.ndarray, action: int) -> tuple[float, int | None]:
        states, q, n = self._arrays(action)
        if n == 0:
            return 0.0, None
        nb = entry[action]
        if nb is None or nb.n_seen != n:
            nb = entry[action] = _merge(nb, states, n, state, self.k)
        if nb.d2[0] <= self.tau * self.tau:
            rec = int(nb.idx[0])
            return float(q[rec]), rec
        return float(q[nb.idx].sum() / len(nb.idx)), None

    def _locate(self, state, action: int) -> tuple[float, int | None]:
        state = np.asarray(state, dtype=np.float64)
        return self._lookup(self._entry(state), state, action)

    def estimate(self, state, action: int) -> float:
        return self._locate(state, action)[0]

    def estimates(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        entry = self._entry(state)
        return np.array([self._lookup(entry, state, a)[0] for a in range(self.n_actions)])

    def greedy(self, state) -> int:
        return int(np.argmax(self.estimates(state)))


class QDatabase(_QFunction):
    def __init__(self, dim: int, n_actions: int = N_ACTIONS, k: int = K_NEIGHBORS,
                 tau: float = REVISIT_TAU):
        self.dim = dim
        self.n_actions = n_actions
        self.k = k
        self.tau = tau
        self._states = [np.empty((16, dim)) for _ in range(n_actions)]
        self._q = [np.empty(16) for _ in range(n_actions)]
        self._n = [0] * n_actions
        # checkpoint id -> per-action snapshot of q for the records existing then
        self.checkpoints: dict[int, list[np.ndarray]] = {}
        self._memo: dict = {}

    def __len__(self) -> int:
        return sum(self._n)

    def counts(self) -> list[int]:
        return list(self._n)

    def _arrays(self, action):
        return self._states[action], self._q[action], self._n[action]

    def records(self, action: int) -> tuple[np.ndarray, np.ndarray]:
        n = self._n[action]
        return self._states[action][:n], self._q[action][:n]

    def _insert(self, state: np.ndarray, action: int, q: float) -> None:
        n = self._n[action]
        if n == len(self._q[action]):
            self._states[action] = np.concatenate([self._states[action], np.empty_like(self._states[action])])
            self._q[action] = np.concatenate([self._q[action], np.empty_like(self._q[action])])
        self._states[action][n] = state
        self._q[action][n] = q
        self._n[action] = n + 1

    def update(self, state, action: int, reward: float, next_state=None,
               alpha: float = 0.1, gamma: float = 0.9) -> float:
        """One Q-learning step; ``next_state=None`` marks a terminal transition.

        Returns the new q value stored for (state, action).
        """
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.dim,):
            raise ValueError(f"state has shape {state.shape}, expected ({self.dim},)")
        old, rec = self._locate(state, action)
        target = float(reward)
        if next_state is not None:
            target += gamma * float(np.max(self.estimates(next_state)))
        new = old + alpha * (target - old)
        if rec is None:
            self._insert(state, action, new)
        else:
            self._q[action][rec] = new
        return new

    def checkpoint(self, ckpt_id: int) -> None:
        if ckpt_id in self.checkpoints:
            raise ValueError(f"checkpoint {ckpt_id} already exists")
        if self.checkpoints and ckpt_id < max(self.checkpoints):
            raise ValueError(f"checkpoint {ckpt_id} precedes existing checkpoint {max(self.checkpoints)}")
        self.checkpoints[ckpt_id] = [self._q[a][:self._n[a]].copy() for a in range(self.n_actions)]

    def restore(self, ckpt_id: int) -> "QView":
        if ckpt_id not in self.checkpoints:
            raise KeyError(f"unknown checkpoint {ckpt_id}")
        return QView(self, ckpt_id)


class QView(_QFunction):
    """Read-only Q function as it was at a checkpoint."""

    def __init__(self, db: QDatabase, ckpt_id: int):
        self.ckpt_id = ckpt_id
        self.n_actions, self.k, self.tau = db.n_actions, db.k, db.tau
        snap = db.checkpoints[ckpt_id]
        self._q = snap
        self._n = [len(q) for q in snap]
        self._states = [db._states[a][:self._n[a]].copy() for a in range(db.n_actions)]
        self._memo = {}

    def __len__(self) -> int:
        return sum(self._n)

    def _arrays(self, action):
        return self._states[action], self._q[action], self._n[action]


def q_estimate(qf: _QFunction, state, action: int) -> float:
    return qf.estimate(state, action)


def q_update(db: QDatabase, s_t, a_t: int, r: float, s_next, alpha: float, gamma: float) -> float:
    return db.update(s_t, a_t, r, s_next, alpha, gamma)


def select_action(qf: _QFunction, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action id."""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(qf.n_actions))
    return qf.greedy(state)


# -- database file ------------------------------------------------------------

DB_MAGIC = b"SEMLOCQDB\0"
DB_VERSION = 1


def save_database(db: QDatabase, path) -> None:
    ckpts = sorted(db.checkpoints)
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<IQIIIdI", DB_VERSION, len(db), db.dim, db.n_actions, db.k, db.tau, len(ckpts)))
        fh.write(np.asarray(ckpts, dtype="<u8").tobytes())
        for a in range(db.n_actions):
            states, q = db.records(a)
            for i in range(len(q)):
                fh.write(struct.pack("<B", a))
                fh.write(states[i].astype("<f8").tobytes())
                fh.write(struct.pack("<dI", q[i], len(ckpts)))
                for c in ckpts:
                    snap = db.checkpoints[c][a]
                    if i < len(snap):
                        fh.write(struct.pack("<QBd", c, 1, snap[i]))
                    else:
                        fh.write(struct.pack("<QBd", c, 0, 0.0))


def load_database(path) -> QDatabase:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(DB_MAGIC):
        raise ValueError(f"{path}: not a Q database file")
    try:
        return _parse_database(data, path)
    except struct.error:
        raise ValueError(f"{path}: truncated database file") from None


def _parse_database(data: bytes, path) -> QDatabase:
    pos = len(DB_MAGIC)
    head = "<IQIIIdI"
    version, count, dim, n_actions, k, tau, n_ck = struct.unpack_from(head, data, pos)
    pos += struct.calcsize(head)
    if version != DB_VERSION:
        raise ValueError(f"{path}: unsupported database version {version}")
    if len(data) < pos + 8 * n_ck:
        raise struct.error("checkpoint table")
    ckpts = [int(c) for c in np.frombuffer(data, dtype="<u8", count=n_ck, offset=pos)]
    pos += 8 * n_ck
    db = QDatabase(dim, n_actions, k, tau)
    snaps = {c: [[] for _ in range(n_actions)] for c in ckpts}
    for _ in range(count):
        (a,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if len(data) < pos + 8 * dim:
            raise struct.error("state")
        state = np.frombuffer(data, dtype="<f8", count=dim, offset=pos)
        pos += 8 * dim
        q, n_hist = struct.unpack_from("<dI", data, pos)
        pos += 12
        if a >= n_actions:
            raise ValueError(f"{path}: action id {a} out of range")
        for _ in range(n_hist):
            c, flag, qc = struct.unpack_from("<QBd", data, pos)
            pos += 17
            if c not in snaps:
                raise ValueError(f"{path}: history refers to unknown checkpoint {c}")
            if flag:
                if len(snaps[c][a]) != db._n[a]:
                    raise ValueError(f"{path}: checkpoint {c} history is not a prefix of the records")
                snaps[c][a].append(qc)
        db._insert(np.array(state), a, q)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in database file")
    for c in ckpts:
        db.checkpoints[c] = [np.array(v, dtype=np.float64) for v in snaps[c]]
    return db
