"""Pure-Python graph-walk and insertion kernels.

This is the reference formulation; ``_kernel.pyx`` is a line-for-line
compiled port. Vertices are internal row indices into ``vectors``.

Ordering convention used throughout: a candidate ``(s1, i1)`` is better
than ``(s2, i2)`` when ``s1 > s2``, or the scores tie and ``i1 < i2``.
Heap keys encode that as ``(-s, i)`` for the max-queue and ``(s, -i)`` for
the bounded result set (whose root is the current worst hit).
"""
from __future__ import annotations

import heapq
import math

import numpy as np

BACKEND = "python"


def _better(s1: float, i1: int, s2: float, i2: int) -> bool:
    return s1 > s2 or (s1 == s2 and i1 < i2)


class Scratch:
    """Per-thread buffers reused across queries against one graph."""

    def __init__(self, capacity: int) -> None:
        capacity = max(capacity, 1)
        self.seen = np.zeros(capacity, dtype=np.uint32)
        self.cache = np.zeros(capacity, dtype=np.float64)
        self.checked = np.zeros(capacity, dtype=np.uint32)
        self.seen_tag = 0
        self.check_tag = 0

    @property
    def capacity(self) -> int:
        return self.seen.shape[0]


class _Ctx:
    __slots__ = ("vec", "metric", "q", "s", "evals", "budget")

    def __init__(self, vectors, metric, q, scratch):
        self.vec = vectors
        self.metric = metric
        self.q = q
        self.s = scratch
        self.evals = 0
        self.budget = 0
        scratch.seen_tag += 1
        if scratch.seen_tag > 0xFFFFFFFF:
            scratch.seen[:] = 0
            scratch.seen_tag = 1

    def bump_check(self):
        s = self.s
        s.check_tag += 1
        if s.check_tag > 0xFFFFFFFF:
            s.checked[:] = 0
            s.check_tag = 1

    def scores(self, idx: np.ndarray) -> np.ndarray:
        """Scores for ``idx``, memoized per query."""
        s = self.s
        out = np.empty(len(idx), dtype=np.float64)
        fresh = s.seen[idx] != s.seen_tag
        if fresh.any():
            todo = idx[fresh]
            rows = self.vec[todo].astype(np.float64)
            if self.metric == 0:
                diff = rows - self.q
                vals = -np.sqrt(np.einsum("ij,ij->i", diff, diff))
            else:
                vals = rows @ self.q
            s.cache[todo] = vals
            s.seen[todo] = s.seen_tag
            self.evals += len(todo)
        out[:] = s.cache[idx]
        return out


def _walk_layer(ctx: _Ctx, links, counts, entries, factor):
    """Bounded best-first walk; returns hits sorted best-first."""
    s = ctx.s
    ctx.bump_check()
    tag = s.check_tag
    checked = s.checked
    cand: list = []
    found: list = []
    ents = [int(e) for e in entries if checked[e] != tag]
    for e in ents:
        checked[e] = tag
    if ents:
        sc = ctx.scores(np.asarray(ents, dtype=np.int64))
        for e, v in zip(ents, sc):
            v = float(v)
            heapq.heappush(cand, (-v, e))
            heapq.heappush(found, (v, -e))
            if len(found) > factor:
                heapq.heappop(found)
    while cand:
        neg, cur = heapq.heappop(cand)
        cur_s = -neg
        worst_s, worst_ni = found[0]
        if len(found) >= factor and _better(worst_s, -worst_ni, cur_s, cur):
            break
        if ctx.budget and ctx.evals >= ctx.budget:
            break
        row = links[cur, : counts[cur]]
        if len(row) == 0:
            continue
        fresh = row[checked[row] != tag]
        if len(fresh) == 0:
            continue
        checked[fresh] = tag
        sc = ctx.scores(fresh.astype(np.int64))
        for v, sv in zip(fresh.tolist(), sc.tolist()):
            if len(found) < factor or _better(sv, v, found[0][0], -found[0][1]):
                heapq.heappush(cand, (-sv, v))
                heapq.heappush(found, (sv, -v))
                if len(found) > factor:
                    heapq.heappop(found)
    hits = sorted(found, key=lambda t: (-t[0], -t[1]))
    return [-ni for _, ni in hits], [sv for sv, _ in hits]


def search_layer(vectors, links, counts, metric, q, entries, factor, scratch):
    ctx = _Ctx(vectors, metric, q, scratch)
    idx, sc = _walk_layer(ctx, links, counts, entries, factor)
    return np.asarray(idx, dtype=np.int64), np.asarray(sc, dtype=np.float64), ctx.evals


def _descend(ctx, links_up, counts_up, entry, from_layer, to_layer):
    cur = entry
    for t in range(from_layer, to_layer, -1):
        idx, _ = _walk_layer(ctx, links_up[t - 1], counts_up[t - 1], [cur], 1)
        cur = idx[0]
    return cur


def knn_search(vectors, links0, counts0, links_up, counts_up, entry, max_layer,
               metric, q, l, k, scratch, max_evals=0):
    ctx = _Ctx(vectors, metric, q, scratch)
    ctx.budget = int(max_evals)
    cur = _descend(ctx, links_up, counts_up, int(entry), max_layer, 0)
    idx, sc = _walk_layer(ctx, links0, counts0, [cur], l)
    return (np.asarray(idx[:k], dtype=np.int64),
            np.asarray(sc[:k], dtype=np.float64), ctx.evals)


def _pair_score(vectors, metric, a: int, b: int) -> float:
    x = vectors[a].astype(np.float64)
    y = vectors[b].astype(np.float64)
    if metric == 0:
        diff = x - y
        return -math.sqrt(float(np.dot(diff, diff)))
    return float(np.dot(x, y))


def _connect(vectors, metric, links, counts, cap, node, nb):
    deg = int(counts[node])
    row = links[node]
    if nb in row[:deg]:
        return
    if deg < cap:
        row[deg] = nb
        counts[node] = deg + 1
        return
    pool = [int(v) for v in row[:deg]] + [nb]
    scored = [(_pair_score(vectors, metric, node, v), v) for v in pool]
    scored.sort(key=lambda t: (-t[0], t[1]))
    row[:cap] = [v for _, v in scored[:cap]]
    counts[node] = cap


def insert(vectors, links0, counts0, links_up, counts_up, new, level, entry,
           max_layer, metric, build_l, M, M0, scratch):
    q = vectors[new].astype(np.float64)
    ctx = _Ctx(vectors, metric, q, scratch)
    scratch.seen[new] = scratch.seen_tag
    scratch.cache[new] = -1e308
    top = min(level, max_layer)
    cur = _descend(ctx, links_up, counts_up, int(entry), max_layer, top)
    for t in range(top, -1, -1):
        if t == 0:
            links, counts, cap = links0, counts0, M0
        else:
            links, counts, cap = links_up[t - 1], counts_up[t - 1], M
        # Mark the new row checked for this layer walk via a pre-bumped tag.
        ctx.s.checked[new] = ctx.s.check_tag + 1
        idx, _ = _walk_layer(ctx, links, counts, [cur], build_l)
        sel = idx[:cap]
        links[new, : len(sel)] = sel
        counts[new] = len(sel)
        for nb in sel:
            _connect(vectors, metric, links, counts, cap, nb, new)
        if sel:
            cur = sel[0]
    return ctx.evals
