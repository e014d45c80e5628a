"""Expectile regression of the degree function on tabular replay data.

The degree of a state is the smallest ``max_a Q`` over its neighbors. With
only samples ``(s, s')`` available, a low expectile of the targets
``max_a Q(s', a)`` approximates that minimum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mdp import neighbor_min

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.01
DEFAULT_LR = 0.05
DEFAULT_STEPS = 10**4


def _check_tau(tau: float, allow_half: bool = False) -> float:
    hi_ok = tau <= 0.5 if allow_half else tau < 0.5
    if not (tau > 0.0 and hi_ok):
        raise ValueError(f"expectile level tau must lie in (0, 0.5), got {tau}")
    return float(tau)


def expectile_loss(y, x, tau: float = DEFAULT_TAU, *, allow_half: bool = False):
    """``tau (y-x)^2`` when ``y >= x``, else ``(1-tau) (y-x)^2``."""
    tau = _check_tau(tau, allow_half)
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    out = np.where(diff >= 0, tau, 1.0 - tau) * diff**2
    return float(out) if out.ndim == 0 else out


def expectile_grad(y, x, tau: float = DEFAULT_TAU, *, allow_half: bool = False):
    """Derivative of :func:`expectile_loss` with respect to ``x``."""
    tau = _check_tau(tau, allow_half)
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    out = -2.0 * np.where(diff >= 0, tau, 1.0 - tau) * diff
    return float(out) if out.ndim == 0 else out


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions ``(s, a, r, s')``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._s = np.zeros(capacity, dtype=np.int64)
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._s_next = np.zeros(capacity, dtype=np.int64)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s: int, a: int, r: float, s_next: int) -> None:
        i = self._head
        self._s[i], self._a[i], self._r[i], self._s_next[i] = s, a, r, s_next
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for s, a, r, s_next in transitions:
            self.add(s, a, r, s_next)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stored transitions, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._head) % self.capacity
        return self._s[order], self._a[order], self._r[order], self._s_next[order]

    def sample(self, rng: np.random.Generator) -> tuple[int, int, float, int]:
        if self._size == 0:
            raise IndexError("sample from an empty replay buffer")
        i = int(rng.integers(self._size))
        return int(self._s[i]), int(self._a[i]), float(self._r[i]), int(self._s_next[i])


@dataclass
class DegreeTable:
    d: np.ndarray
    undersampled: list[int] = field(default_factory=list)

    def to_list(self) -> list[float]:
        return self.d.tolist()


def exact_degree(q: np.ndarray, neighbors: np.ndarray) -> DegreeTable:
    """``D(s) = min over s' in N^s of max_a Q(s', a)``."""
    neighbors = np.asarray(neighbors, dtype=bool)
    empty = np.flatnonzero(~neighbors.any(axis=1))
    if empty.size:
        raise ValueError(f"empty neighbor set for states {empty.tolist()}")
    return DegreeTable(neighbor_min(np.asarray(q, dtype=float).max(axis=1), neighbors))


def fit_degree(
    buffer: ReplayBuffer,
    q: np.ndarray,
    tau: float = DEFAULT_TAU,
    lr: float = DEFAULT_LR,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
) -> DegreeTable:
    """Fit one scalar per state by SGD on the expectile loss.

    Every iteration draws, for each state seen as a source in the buffer,
    one of its stored transitions uniformly (so neighbors are weighted by
    their empirical frequency) and takes a gradient step on that state's
    scalar. ``tau = 0.5`` is accepted as a diagnostic that fits the mean.
    States never seen as a source keep the initial value 0 and are listed
    in ``undersampled``.
    """
    from .envgen import STREAM_EXPECTILE, make_rng

    tau = _check_tau(tau, allow_half=True)
    if len(buffer) == 0:
        raise ValueError("cannot fit on an empty buffer")
    q = np.asarray(q, dtype=float)
    n_states = q.shape[0]
    src, _, _, dst = buffer.arrays()
    targets_all = q.max(axis=1)[dst]
    seen = np.unique(src)
    counts = np.array([np.count_nonzero(src == s) for s in seen])
    padded = np.zeros((seen.size, counts.max()))
    for i, s in enumerate(seen):
        padded[i, : counts[i]] = targets_all[src == s]
    rng = make_rng(seed, 0, STREAM_EXPECTILE)
    d = np.zeros(seen.size)
    rows = np.arange(seen.size)
    for _ in range(steps):
        pick = (rng.random(seen.size) * counts).astype(np.int64)
        y = padded[rows, pick]
        d -= lr * expectile_grad(y, d, tau, allow_half=True)
    out = np.zeros(n_states)
    out[seen] = d
    undersampled = sorted(set(range(n_states)) - set(seen.tolist()))
    return DegreeTable(out, undersampled)


def collect_transitions(env, n_samples: int, seed: int = 0, min_per_neighbor: int = 0,
                        max_samples: int = 10**7, per_neighbor_cap: int | None = None) -> ReplayBuffer:
    """Fill a buffer with uniformly-random (s, a) draws and sampled ``s'``.

    Sampling continues past ``n_samples`` until every reachable ``(s, s')``
    pair has at least ``min_per_neighbor`` entries, or ``max_samples`` draws
    were made (then a warning is logged). With ``per_neighbor_cap`` only the
    first ``cap`` draws of each ``(s, s')`` pair are kept, so rare successors
    are not outweighed by frequent ones in the degree fit.
    """
    from .covering import compute_neighbors
    from .envgen import STREAM_EXPECTILE, make_rng

    if per_neighbor_cap is not None and per_neighbor_cap < max(min_per_neighbor, 1):
        raise ValueError("per_neighbor_cap must be at least min_per_neighbor")
    rng = make_rng(seed, 1, STREAM_EXPECTILE)
    S, A = env.n_states, env.n_actions
    mask = compute_neighbors(env.kernel)
    cdf = np.cumsum(env.kernel, axis=2)
    kept = []
    counts = np.zeros(S * S, dtype=np.int64)
    total, chunk = 0, max(n_samples, 1000)
    while total < max_samples:
        s = rng.integers(S, size=chunk)
        a = rng.integers(A, size=chunk)
        u = rng.random(chunk)
        nxt = np.minimum((cdf[s, a] <= u[:, None]).sum(axis=1), S - 1)
        key = s * S + nxt
        if per_neighbor_cap is not None:
            # rank of each draw among earlier draws of the same pair
            order = np.argsort(key, kind="stable")
            sk = key[order]
            starts = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1]])
            rank = np.empty(chunk, dtype=np.int64)
            rank[order] = np.arange(chunk) - np.repeat(starts, np.diff(np.r_[starts, chunk]))
            keep = rank + counts[key] < per_neighbor_cap
            s, a, nxt, key = s[keep], a[keep], nxt[keep], key[keep]
        kept.append((s, a, nxt))
        np.add.at(counts, key, 1)
        total += chunk
        if total >= n_samples and counts.reshape(S, S)[mask].min() >= min_per_neighbor:
            break
    else:
        log.warning("coverage of %d samples per neighbor not reached after %d draws", min_per_neighbor, total)
    s, a, nxt = (np.concatenate(c) for c in zip(*kept))
    buffer = ReplayBuffer(max(s.size, 1))
    buffer.extend(zip(s.tolist(), a.tolist(), env.reward[s, a].tolist(), nxt.tolist()))
    return buffer
