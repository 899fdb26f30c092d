"""Balanced edge-cut graph partitioning.

Weighted greedy region growing produces an initial balanced assignment,
then Fiduccia-Mattheyses passes (tentative moves with vertex locking and
rollback to the best prefix) improve the cut. A final hill-climb leaves
the result at a local optimum: no single feasible vertex move lowers the
cut. Several seeded restarts are tried and the lowest cut kept.

Edges are counted with multiplicity, so a mutual pair ``u->v, v->u``
weighs 2 in the cut.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from metashard.errors import BalanceInfeasibleError


def adjacency_matrix(n: int, edges) -> np.ndarray:
    """Symmetric edge-multiplicity matrix from directed ``(u, v)`` pairs."""
    A = np.zeros((n, n), dtype=np.float64)
    for u, v in edges:
        if u != v:
            A[u, v] += 1.0
            A[v, u] += 1.0
    return A


def edge_cut(A: np.ndarray, labels: np.ndarray) -> float:
    """Total weight of edges whose endpoints sit in different partitions."""
    diff = labels[:, None] != labels[None, :]
    return float(A[diff].sum() / 2.0)


def weight_cap(weights: np.ndarray, w: int, epsilon: float) -> float:
    return (1.0 + epsilon) * float(np.sum(weights)) / w


def _bfs_far(A: np.ndarray, seeds: list[int], avail: np.ndarray) -> int:
    """Vertex farthest (in hops) from ``seeds``; unreachable counts as farthest."""
    n = len(A)
    dist = np.full(n, -1)
    dq = deque(seeds)
    for s in seeds:
        dist[s] = 0
    while dq:
        u = dq.popleft()
        for v in np.flatnonzero(A[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                dq.append(v)
    score = np.where(dist < 0, n + 1, dist).astype(np.float64)
    score[~avail] = -1
    return int(np.argmax(score))


def _grow(A: np.ndarray, weights: np.ndarray, w: int, cap: float,
          rng: np.random.Generator) -> np.ndarray | None:
    n = len(A)
    labels = np.full(n, -1, dtype=np.int64)
    loads = np.zeros(w)
    seeds = [int(rng.integers(n))]
    avail = np.ones(n, dtype=bool)
    avail[seeds[0]] = False
    while len(seeds) < min(w, n):
        s = _bfs_far(A, seeds, avail)
        seeds.append(s)
        avail[s] = False
    for p, s in enumerate(seeds):
        labels[s] = p
        loads[p] += weights[s]
    affinity = np.zeros((n, w))
    for p, s in enumerate(seeds):
        affinity[:, p] += A[:, s]
    unassigned = labels < 0
    while unassigned.any():
        placed = False
        for p in np.argsort(loads, kind="stable"):
            fits = unassigned & (loads[p] + weights <= cap + 1e-12)
            if not fits.any():
                continue
            cand = np.flatnonzero(fits)
            # Strongest pull into p first, then the heavier vertex.
            key = affinity[cand, p] * 1e6 + weights[cand]
            v = int(cand[np.argmax(key)])
            labels[v] = p
            loads[p] += weights[v]
            affinity[:, p] += A[:, v]
            unassigned[v] = False
            placed = True
            break
        if not placed:
            return None
    return labels


def _pack(weights: np.ndarray, w: int, cap: float) -> np.ndarray | None:
    """Heaviest-first into the lightest partition; a balance-only fallback."""
    labels = np.full(len(weights), -1, dtype=np.int64)
    loads = np.zeros(w)
    for v in np.argsort(-weights, kind="stable"):
        p = int(np.argmin(loads))
        if loads[p] + weights[v] > cap + 1e-12:
            return None
        labels[v] = p
        loads[p] += weights[v]
    return labels


def _conn(A: np.ndarray, labels: np.ndarray, w: int) -> np.ndarray:
    onehot = np.zeros((len(labels), w))
    onehot[np.arange(len(labels)), labels] = 1.0
    return A @ onehot


def _best_move(D, labels, weights, loads, cap, locked=None):
    n, w = D.shape
    own = D[np.arange(n), labels]
    gain = D - own[:, None]
    gain[np.arange(n), labels] = -np.inf
    over = loads[None, :] + weights[:, None] > cap + 1e-12
    gain[over] = -np.inf
    if locked is not None:
        gain[locked] = -np.inf
    flat = int(np.argmax(gain))
    v, q = divmod(flat, w)
    return v, q, gain[v, q]


def _apply(A, D, labels, loads, weights, v, q):
    p = labels[v]
    D[:, p] -= A[:, v]
    D[:, q] += A[:, v]
    loads[p] -= weights[v]
    loads[q] += weights[v]
    labels[v] = q


def _best_swap(A, D, labels, weights, loads, cap):
    """Best exchange of two vertices between different partitions."""
    n = len(labels)
    idx = np.arange(n)
    own = D[idx, labels]
    # gain of moving u into v's partition, for every ordered pair
    g_uv = D[:, labels] - own[:, None]
    gain = g_uv + g_uv.T - 2.0 * A
    same = labels[:, None] == labels[None, :]
    dw = weights[None, :] - weights[:, None]  # load change of u's partition
    ok_u = loads[labels][:, None] + dw <= cap + 1e-12
    ok_v = loads[labels][None, :] - dw <= cap + 1e-12
    gain[same | ~ok_u | ~ok_v] = -np.inf
    flat = int(np.argmax(gain))
    u, v = divmod(flat, n)
    return u, v, gain[u, v]


def _fm_passes(A, D, labels, weights, loads, cap, max_passes):
    n = len(labels)
    improved = False
    for _ in range(max_passes):
        locked = np.zeros(n, dtype=bool)
        trail = []
        gain_sum, best_sum, best_len = 0.0, 0.0, 0
        for _step in range(n):
            v, q, g = _best_move(D, labels, weights, loads, cap, locked)
            if not np.isfinite(g):
                break
            trail.append((v, labels[v]))
            _apply(A, D, labels, loads, weights, v, q)
            locked[v] = True
            gain_sum += g
            if gain_sum > best_sum + 1e-9:
                best_sum, best_len = gain_sum, len(trail)
        for v, p in reversed(trail[best_len:]):
            _apply(A, D, labels, loads, weights, v, p)
        if best_len == 0:
            break
        improved = True
    return improved


def _refine(A, labels, weights, w, cap, max_passes=25, max_rounds=50):
    labels = labels.copy()
    D = _conn(A, labels, w)
    loads = np.bincount(labels, weights=weights, minlength=w).astype(np.float64)
    for _ in range(max_rounds):
        _fm_passes(A, D, labels, weights, loads, cap, max_passes)
        u, v, g = _best_swap(A, D, labels, weights, loads, cap)
        if not (np.isfinite(g) and g > 1e-9):
            break
        pu, pv = labels[u], labels[v]
        _apply(A, D, labels, loads, weights, u, pv)
        _apply(A, D, labels, loads, weights, v, pu)
    # Hill-climb to a strict local optimum.
    while True:
        v, q, g = _best_move(D, labels, weights, loads, cap)
        if not (np.isfinite(g) and g > 1e-9):
            break
        _apply(A, D, labels, loads, weights, v, q)
    return labels


def _random_start(weights, w, cap, rng):
    n = len(weights)
    for _ in range(8):
        labels = np.empty(n, dtype=np.int64)
        loads = np.zeros(w)
        for v in rng.permutation(n):
            room = np.flatnonzero(loads + weights[v] <= cap + 1e-12)
            if len(room) == 0:
                break
            p = int(rng.choice(room))
            labels[v] = p
            loads[p] += weights[v]
        else:
            return labels
    return None


def partition_graph(A: np.ndarray, weights, w: int, epsilon: float = 0.05,
                    seed: int = 0, restarts: int | None = None) -> np.ndarray:
    """Split the vertices of ``A`` into ``w`` weight-balanced parts with a small cut.

    Every part weighs at most ``(1 + epsilon) * total / w``.

    Raises:
        BalanceInfeasibleError: when a vertex alone exceeds the cap, or no
            balanced assignment could be found.
    """
    A = np.asarray(A, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(A)
    if w < 1 or w > n:
        raise ValueError(f"cannot split {n} vertices into {w} parts")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if np.any(weights < 0):
        raise ValueError("vertex weights must be non-negative")
    if w == 1:
        return np.zeros(n, dtype=np.int64)
    cap = weight_cap(weights, w, epsilon)
    if weights.max() > cap + 1e-12:
        raise BalanceInfeasibleError(
            f"vertex weight {weights.max()} exceeds the partition cap {cap:.3f}"
        )
    if restarts is None:
        restarts = min(128, max(8, 2048 // n))
    rng = np.random.Generator(np.random.PCG64(seed))
    best, best_cut = None, np.inf
    for attempt in range(max(restarts, 1)):
        # Alternate region-growing and random balanced starts.
        if attempt % 2 == 0:
            start = _grow(A, weights, w, cap, rng)
        else:
            start = _random_start(weights, w, cap, rng)
        if start is None:
            start = _pack(weights, w, cap)
        if start is None:
            continue
        labels = _refine(A, start, weights, w, cap)
        cut = edge_cut(A, labels)
        if cut < best_cut - 1e-9:
            best, best_cut = labels, cut
    if best is None:
        raise BalanceInfeasibleError("no balanced assignment found under the weight cap")
    return best


def is_local_optimum(A: np.ndarray, labels: np.ndarray, weights, w: int, epsilon: float) -> bool:
    """True when no single feasible vertex move reduces the cut."""
    weights = np.asarray(weights, dtype=np.float64)
    cap = weight_cap(weights, w, epsilon)
    D = _conn(A, labels, w)
    loads = np.bincount(labels, weights=weights, minlength=w).astype(np.float64)
    _, _, g = _best_move(D, labels, weights, loads, cap)
    return not (np.isfinite(g) and g > 1e-9)
