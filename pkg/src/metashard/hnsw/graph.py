"""Layered proximity graph with graph-walk search.

Storage is array-of-rows: row ``r`` holds one item's vector, external id,
top level and adjacency. Layer 0 adjacency is an ``(capacity, M0)`` int32
table, upper layers share one ``(layers, capacity, M)`` table. The hot
loops (walks and insertion) live in the kernel module chosen by
:mod:`metashard.hnsw._backend`.
"""
from __future__ import annotations

import io
import math
import struct
import threading
from typing import Iterable

import numpy as np

from metashard.errors import (
    DimensionError,
    DuplicateIdError,
    EmptyIndexError,
    EmptyInputError,
    IndexFormatError,
    InvalidEntryError,
)
from metashard.hnsw import _backend
from metashard.metric import MetricKind, as_matrix, as_vector
from metashard.result import QueryResult, rank

MAGIC = b"MSHNSWG\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIBIQIIiq")

DEFAULT_M = 16
DEFAULT_M0 = 32
DEFAULT_BUILD_L = 100


def draw_level(uniform_draw: float, level_norm: float) -> int:
    """Top layer for a new item: ``floor(-ln(u) * level_norm)``, ``u`` in (0, 1]."""
    if not 0.0 < uniform_draw <= 1.0:
        raise ValueError(f"uniform_draw must be in (0, 1], got {uniform_draw}")
    if level_norm < 0:
        raise ValueError("level_norm must be non-negative")
    return int(math.floor(-math.log(uniform_draw) * level_norm))


class HnswGraph:
    """Hierarchical proximity graph over float32 vectors.

    Args:
        dim: vector dimension.
        metric: similarity used for construction and search.
        M: out-degree cap on layers above 0.
        M0: out-degree cap on layer 0.
        build_l: walk width used while inserting.
        seed: seeds the level generator; builds are reproducible per seed.
        capacity: rows to preallocate.
        kernel: override the kernel module (tests and benchmarks).
    """

    def __init__(
        self,
        dim: int,
        metric: MetricKind = MetricKind.EUCLIDEAN_NEG,
        M: int = DEFAULT_M,
        M0: int = DEFAULT_M0,
        build_l: int = DEFAULT_BUILD_L,
        seed: int = 0,
        capacity: int = 16,
        kernel=None,
    ) -> None:
        if dim <= 0:
            raise DimensionError("dim must be positive")
        if M < 2 or M0 < 2 or build_l < 1:
            raise ValueError("need M >= 2, M0 >= 2 and build_l >= 1")
        self.dim = int(dim)
        self.metric = MetricKind(metric)
        self.M = int(M)
        self.M0 = int(M0)
        self.build_l = int(build_l)
        self.level_norm = 1.0 / math.log(self.M)
        self.seed = seed
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._kernel = kernel or _backend.kernel
        self._n = 0
        self._id_to_row: dict[int, int] = {}
        self.entry_row = -1
        self.max_layer = -1
        self._alloc(max(int(capacity), 1), 0)
        self._local = threading.local()

    # -- storage -----------------------------------------------------------

    def _alloc(self, capacity: int, upper: int) -> None:
        self._vectors = np.zeros((capacity, self.dim), dtype=np.float32)
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._levels = np.zeros(capacity, dtype=np.int32)
        self._links0 = np.zeros((capacity, self.M0), dtype=np.int32)
        self._counts0 = np.zeros(capacity, dtype=np.int32)
        self._links_up = np.zeros((upper, capacity, self.M), dtype=np.int32)
        self._counts_up = np.zeros((upper, capacity), dtype=np.int32)

    def _grow(self, capacity: int, upper: int) -> None:
        old = (self._vectors, self._ids, self._levels, self._links0,
               self._counts0, self._links_up, self._counts_up)
        n, old_up = self._n, old[5].shape[0]
        self._alloc(capacity, upper)
        self._vectors[:n] = old[0][:n]
        self._ids[:n] = old[1][:n]
        self._levels[:n] = old[2][:n]
        self._links0[:n] = old[3][:n]
        self._counts0[:n] = old[4][:n]
        self._links_up[:old_up, :n] = old[5][:, :n]
        self._counts_up[:old_up, :n] = old[6][:, :n]

    def _scratch(self):
        s = getattr(self._local, "scratch", None)
        cap = self._vectors.shape[0]
        if s is None or s.capacity < cap or type(s) is not self._kernel.Scratch:
            s = self._kernel.Scratch(cap)
            self._local.scratch = s
        return s

    # -- introspection -----------------------------------------------------

    def __len__(self) -> int:
        return self._n

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._id_to_row

    @property
    def backend(self) -> str:
        return self._kernel.BACKEND

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._n]

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[: self._n]

    @property
    def entry_vertex(self) -> int:
        if self._n == 0:
            raise EmptyIndexError("graph is empty")
        return int(self._ids[self.entry_row])

    def vector(self, item_id: int) -> np.ndarray:
        return self._vectors[self._id_to_row[int(item_id)]]

    def level_of(self, item_id: int) -> int:
        return int(self._levels[self._id_to_row[int(item_id)]])

    def layer_vertices(self, layer: int) -> np.ndarray:
        """External ids present at ``layer``, in insertion order."""
        return self._ids[: self._n][self._levels[: self._n] >= layer]

    def _layer_tables(self, layer: int):
        if layer == 0:
            return self._links0, self._counts0
        return self._links_up[layer - 1], self._counts_up[layer - 1]

    def neighbors(self, item_id: int, layer: int = 0) -> list[int]:
        row = self._id_to_row[int(item_id)]
        if self._levels[row] < layer:
            raise InvalidEntryError(f"vertex {item_id} is not present at layer {layer}")
        links, counts = self._layer_tables(layer)
        return [int(self._ids[r]) for r in links[row, : counts[row]]]

    def adjacency(self, layer: int = 0) -> dict[int, list[int]]:
        """Layer ``layer`` as a plain ``{id: [neighbor ids]}`` map."""
        return {int(v): self.neighbors(v, layer) for v in self.layer_vertices(layer)}

    # -- construction ------------------------------------------------------

    def insert(self, item_id: int, x, rng: np.random.Generator | None = None) -> int:
        """Add one item; returns the layer it was assigned.

        Raises:
            DuplicateIdError: if ``item_id`` is already indexed.
            DimensionError: if ``x`` has the wrong dimension.
        """
        item_id = int(item_id)
        if item_id in self._id_to_row:
            raise DuplicateIdError(f"id {item_id} already present")
        vec = as_vector(x, self.dim)
        rng = rng if rng is not None else self._rng
        level = draw_level(1.0 - rng.random(), self.level_norm)

        cap = self._vectors.shape[0]
        need_up = max(level, self._links_up.shape[0])
        if self._n == cap or need_up > self._links_up.shape[0]:
            new_cap = cap * 2 if self._n == cap else cap
            self._grow(new_cap, need_up)

        row = self._n
        self._vectors[row] = vec
        self._ids[row] = item_id
        self._levels[row] = level
        self._id_to_row[item_id] = row
        self._n += 1

        if self.entry_row < 0:
            self.entry_row, self.max_layer = row, level
            return level
        self._kernel.insert(
            self._vectors, self._links0, self._counts0, self._links_up,
            self._counts_up, row, level, self.entry_row, self.max_layer,
            int(self.metric), self.build_l, self.M, self.M0, self._scratch(),
        )
        if level > self.max_layer:
            self.entry_row, self.max_layer = row, level
        return level

    @classmethod
    def build(
        cls,
        items,
        metric: MetricKind = MetricKind.EUCLIDEAN_NEG,
        M: int = DEFAULT_M,
        M0: int = DEFAULT_M0,
        build_l: int = DEFAULT_BUILD_L,
        seed: int = 0,
        ids: Iterable[int] | None = None,
        kernel=None,
    ) -> "HnswGraph":
        """Insert ``items`` sequentially; ids default to ``0..n-1``.

        Raises:
            EmptyInputError: for an empty batch.
            DimensionError: if rows differ in length.
        """
        if items is None or len(items) == 0:
            raise EmptyInputError("cannot build a graph from zero items")
        try:
            mat = as_matrix(items)
        except ValueError as exc:
            if isinstance(exc, DimensionError):
                raise
            if "NaN" in str(exc):
                raise
            raise DimensionError(f"items do not share one dimension: {exc}") from exc
        id_arr = np.arange(len(mat), dtype=np.int64) if ids is None else np.asarray(list(ids), dtype=np.int64)
        if len(id_arr) != len(mat):
            raise ValueError("ids and items differ in length")
        g = cls(mat.shape[1], metric, M, M0, build_l, seed, capacity=len(mat), kernel=kernel)
        for i, row in zip(id_arr.tolist(), mat):
            g.insert(i, row)
        return g

    # -- search ------------------------------------------------------------

    def search_level(self, layer: int, q, entries: Iterable[int], factor: int) -> list[tuple[int, float]]:
        """Walk a single layer from ``entries`` (external ids) with width ``factor``.

        Returns up to ``factor`` ``(id, score)`` pairs, best first.
        """
        if factor < 1:
            raise ValueError("factor must be >= 1")
        qv = as_vector(q, self.dim).astype(np.float64)
        rows = []
        for e in entries:
            row = self._id_to_row.get(int(e))
            if row is None or self._levels[row] < layer or layer > self.max_layer:
                raise InvalidEntryError(f"vertex {e} is not present at layer {layer}")
            rows.append(row)
        links, counts = self._layer_tables(layer)
        idx, sc, _ = self._kernel.search_layer(
            self._vectors, links, counts, int(self.metric), qv,
            np.asarray(rows, dtype=np.int64), int(factor), self._scratch(),
        )
        return [(int(self._ids[r]), float(s)) for r, s in zip(idx, sc)]

    def search(self, q, k: int = 10, l: int = DEFAULT_BUILD_L, max_evals: int = 0) -> QueryResult:
        """Approximate top-``k`` by greedy descent plus a width-``l`` bottom walk.

        A positive ``max_evals`` caps the similarity computations: the walk
        stops expanding once the cap is reached and returns what it has.

        Raises:
            EmptyIndexError: if nothing has been inserted.
        """
        if self._n == 0:
            raise EmptyIndexError("graph is empty")
        if k < 1 or l < 1:
            raise ValueError("k and l must be positive")
        qv = as_vector(q, self.dim).astype(np.float64)
        idx, sc, evals = self._kernel.knn_search(
            self._vectors, self._links0, self._counts0, self._links_up,
            self._counts_up, self.entry_row, self.max_layer, int(self.metric),
            qv, max(l, k), k, self._scratch(), int(max_evals),
        )
        ids, scores = rank(self._ids[idx], sc, k)
        return QueryResult(ids, scores, int(evals))

    # -- validation --------------------------------------------------------

    def violations(self) -> list[str]:
        """Structural invariant check; an empty list means the graph is sound."""
        out = []
        n = self._n
        if n == 0:
            return out
        levels = self._levels[:n]
        if not 0 <= self.entry_row < n:
            return ["entry vertex out of range"]
        if levels[self.entry_row] != self.max_layer:
            out.append("entry vertex is not at max_layer")
        if levels.max() != self.max_layer:
            out.append("max_layer disagrees with vertex levels")
        for t in range(self.max_layer + 1):
            links, counts = self._layer_tables(t)
            cap = self.M0 if t == 0 else self.M
            members = levels >= t
            cnt = counts[:n]
            if np.any(cnt[members] > cap) or np.any(cnt[members] < 0):
                out.append(f"layer {t}: degree cap {cap} exceeded")
                continue
            if np.any(cnt[~members] != 0):
                out.append(f"layer {t}: edges on vertices absent from the layer")
            for r in np.flatnonzero(members):
                nb = links[r, : cnt[r]]
                if np.any(nb < 0) or np.any(nb >= n):
                    out.append(f"layer {t}: vertex {self._ids[r]} has a dangling edge")
                elif np.any(levels[nb] < t):
                    out.append(f"layer {t}: vertex {self._ids[r]} links outside the layer")
                elif np.any(nb == r) or len(set(nb.tolist())) != len(nb):
                    out.append(f"layer {t}: vertex {self._ids[r]} has self or duplicate edges")
        return out

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        n = self._n
        buf = io.BytesIO()
        entry_id = int(self._ids[self.entry_row]) if n else -1
        buf.write(_HEADER.pack(MAGIC, VERSION, int(self.metric), self.dim, n,
                               self.M, self.M0, self.max_layer, entry_id))
        rec = np.dtype([("id", "<i8"), ("v", "<f4", (self.dim,))])
        items = np.empty(n, dtype=rec)
        items["id"] = self._ids[:n]
        items["v"] = self._vectors[:n]
        buf.write(items.tobytes())
        ids = self._ids
        for t in range(self.max_layer + 1):
            links, counts = self._layer_tables(t)
            rows = np.flatnonzero(self._levels[:n] >= t)
            buf.write(struct.pack("<Q", len(rows)))
            for r in rows:
                c = int(counts[r])
                buf.write(struct.pack("<qI", int(ids[r]), c))
                buf.write(ids[links[r, :c]].astype("<i8").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, kernel=None) -> "HnswGraph":
        """Inverse of :meth:`to_bytes`; re-validates every invariant.

        Raises:
            IndexFormatError: on bad magic, unknown version, truncation or a
                structurally invalid graph.
        """
        view = memoryview(data)
        if len(view) < _HEADER.size:
            raise IndexFormatError("file shorter than the header")
        magic, version, metric, dim, n, M, M0, max_layer, entry_id = _HEADER.unpack_from(view, 0)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise IndexFormatError(f"unsupported version {version}")
        try:
            metric = MetricKind(metric)
            g = cls(dim, metric, M, M0, seed=0, capacity=max(n, 1), kernel=kernel)
        except ValueError as exc:
            raise IndexFormatError(f"bad header field: {exc}") from exc
        off = _HEADER.size
        rec = np.dtype([("id", "<i8"), ("v", "<f4", (dim,))])
        end = off + rec.itemsize * n
        if end > len(view):
            raise IndexFormatError("truncated item block")
        items = np.frombuffer(view[off:end], dtype=rec)
        off = end
        g._ids[:n] = items["id"]
        g._vectors[:n] = items["v"]
        g._n = n
        g._id_to_row = {int(i): r for r, i in enumerate(items["id"].tolist())}
        if len(g._id_to_row) != n:
            raise IndexFormatError("duplicate item ids")
        if n == 0:
            if max_layer != -1:
                raise IndexFormatError("empty graph with layers")
            return g
        if max_layer < 0 or entry_id not in g._id_to_row:
            raise IndexFormatError("bad entry vertex or max layer")
        g._grow(max(n, 1), max_layer)
        g.max_layer = max_layer
        g.entry_row = g._id_to_row[entry_id]
        g._levels[:n] = -1
        vert = struct.Struct("<qI")
        try:
            for t in range(max_layer + 1):
                (count,) = struct.unpack_from("<Q", view, off)
                off += 8
                links, counts = g._layer_tables(t)
                cap = M0 if t == 0 else M
                for _ in range(count):
                    vid, c = vert.unpack_from(view, off)
                    off += vert.size
                    row = g._id_to_row.get(vid)
                    if row is None or c > cap:
                        raise IndexFormatError(f"layer {t}: bad vertex record for {vid}")
                    if off + 8 * c > len(view):
                        raise IndexFormatError("truncated adjacency")
                    nb = np.frombuffer(view[off: off + 8 * c], dtype="<i8")
                    off += 8 * c
                    try:
                        links[row, :c] = [g._id_to_row[int(v)] for v in nb]
                    except KeyError as exc:
                        raise IndexFormatError(f"edge to unknown vertex {exc}") from None
                    counts[row] = c
                    if g._levels[row] != t - 1:
                        raise IndexFormatError(f"vertex {vid} at layer {t} missing below")
                    g._levels[row] = t
        except struct.error as exc:
            raise IndexFormatError(f"truncated adjacency: {exc}") from None
        if off != len(view):
            raise IndexFormatError("trailing bytes after adjacency")
        if np.any(g._levels[:n] < 0):
            raise IndexFormatError("items missing from layer 0")
        problems = g.violations()
        if problems:
            raise IndexFormatError("; ".join(problems))
        return g

    @classmethod
    def load(cls, path, kernel=None) -> "HnswGraph":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), kernel=kernel)
