"""Two-level sharded index: a small routing graph over cluster centers whose
bottom layer is split into shards, plus one proximity graph per shard.
"""
from __future__ import annotations

import io
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metashard.errors import DimensionError, IndexFormatError
from metashard.hnsw import HnswGraph
from metashard.hnsw.graph import DEFAULT_BUILD_L, DEFAULT_M, DEFAULT_M0
from metashard.metric import (
    MetricKind,
    as_matrix,
    as_vector,
    normalize,
    normalize_rows,
    score_many,
)
from metashard.partition.clustering import (
    fit_kmeans,
    fit_spherical_kmeans,
    sample_dataset,
    weight_centers,
)
from metashard.partition.partitioner import partition_graph
from metashard.result import QueryResult, merge_topk

logger = logging.getLogger(__name__)

META_MAGIC = b"MSMETA\x00\x00"
META_VERSION = 1
DEFAULT_ROUTE_L = 50


@dataclass
class IndexParams:
    n_prime: int
    m: int
    w: int
    epsilon: float = 0.05
    kmeans_iters: int = 25
    r: int = 0
    seed: int = 0
    M: int = DEFAULT_M
    M0: int = DEFAULT_M0
    build_l: int = DEFAULT_BUILD_L
    assign_l: int = DEFAULT_ROUTE_L

    def validate(self) -> None:
        if not self.m >= self.w >= 1:
            raise ValueError(f"need m >= w >= 1, got m={self.m}, w={self.w}")
        if self.n_prime < self.m:
            raise ValueError(f"need n_prime >= m, got n_prime={self.n_prime}, m={self.m}")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.r < 0:
            raise ValueError("r must be non-negative")


@dataclass
class MetaIndex:
    """Routing graph over centers; ``partition_of[c]`` is center ``c``'s shard."""

    meta_graph: HnswGraph
    partition_of: np.ndarray
    w: int
    center_weights: np.ndarray

    @property
    def m(self) -> int:
        return len(self.meta_graph)

    @property
    def metric(self) -> MetricKind:
        return self.meta_graph.metric

    def top_centers(self, q, K: int, meta_l: int | None = None) -> tuple[np.ndarray, int]:
        """Top-``K`` center ids for ``q`` and the evaluations spent.

        ``meta_l >= m`` requests an exhaustive scan of the centers.
        """
        K = min(K, self.m)
        l = max(K, DEFAULT_ROUTE_L) if meta_l is None else max(meta_l, K)
        if l >= self.m:
            vecs = self.meta_graph.vectors
            s = score_many(self.metric, q, vecs)
            ids = self.meta_graph.ids
            order = np.lexsort((ids, -s))[:K]
            return ids[order], self.m
        res = self.meta_graph.search(q, k=K, l=l)
        return res.ids, res.evaluations

    def route(self, q, K: int, meta_l: int | None = None) -> set[int]:
        ids, _ = self.top_centers(q, K, meta_l)
        return {int(self.partition_of[c]) for c in ids}

    def to_bytes(self) -> bytes:
        g = self.meta_graph.to_bytes()
        buf = io.BytesIO()
        buf.write(struct.pack("<8sIIQQ", META_MAGIC, META_VERSION, self.w, self.m, len(g)))
        buf.write(g)
        buf.write(np.asarray(self.partition_of, dtype="<i4").tobytes())
        buf.write(np.asarray(self.center_weights, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MetaIndex":
        head = struct.Struct("<8sIIQQ")
        if len(data) < head.size:
            raise IndexFormatError("meta file shorter than its header")
        magic, version, w, m, glen = head.unpack_from(data, 0)
        if magic != META_MAGIC:
            raise IndexFormatError(f"bad meta magic {magic!r}")
        if version != META_VERSION:
            raise IndexFormatError(f"unsupported meta version {version}")
        off = head.size
        graph = HnswGraph.from_bytes(data[off: off + glen])
        off += glen
        if len(data) != off + 4 * m + 8 * m or len(graph) != m:
            raise IndexFormatError("meta partition map has the wrong size")
        part = np.frombuffer(data, dtype="<i4", count=m, offset=off).astype(np.int64)
        weights = np.frombuffer(data, dtype="<f8", count=m, offset=off + 4 * m).copy()
        # Center ids are 0..m-1 by construction.
        if sorted(graph.ids.tolist()) != list(range(m)):
            raise IndexFormatError("meta graph ids are not 0..m-1")
        if set(part.tolist()) != set(range(w)):
            raise IndexFormatError("partition ids do not cover 0..w-1")
        return cls(graph, part, int(w), weights)


@dataclass
class Shard:
    shard_id: int
    sub_hnsw: HnswGraph

    @property
    def item_ids(self) -> np.ndarray:
        return self.sub_hnsw.ids

    @property
    def vectors(self) -> np.ndarray:
        return self.sub_hnsw.vectors

    def __len__(self) -> int:
        return len(self.sub_hnsw)

    def search(self, q, k: int, l: int = DEFAULT_BUILD_L, max_evals: int = 0) -> QueryResult:
        return self.sub_hnsw.search(q, k=k, l=l, max_evals=max_evals)


@dataclass
class ShardedIndex:
    """A built index: routing meta-graph (absent for the naive layout) + shards."""

    metric: MetricKind
    dim: int
    shards: list
    meta: MetaIndex | None = None
    params: IndexParams | None = None
    kind: str = "routed"
    n_items: int = 0
    info: dict = field(default_factory=dict)

    @property
    def w(self) -> int:
        return len(self.shards)

    def prepare_query(self, q) -> np.ndarray:
        qv = as_vector(q, self.dim)
        if self.metric is MetricKind.ANGULAR:
            qv = normalize(qv)
        return qv

    def route(self, q, K: int, meta_l: int | None = None) -> set[int]:
        """Shards that must see ``q``; every shard for the naive layout."""
        if self.meta is None:
            return set(range(self.w))
        return self.meta.route(self.prepare_query(q), K, meta_l)

    def search(self, q, K: int = 1, k: int = 10, l: int = DEFAULT_BUILD_L,
               meta_l: int | None = None) -> QueryResult:
        """Route, search each selected shard, merge. Single-process path."""
        qv = self.prepare_query(q)
        evals = 0
        if self.meta is None:
            targets = list(range(self.w))
        else:
            centers, evals = self.meta.top_centers(qv, K, meta_l)
            targets = sorted({int(self.meta.partition_of[c]) for c in centers})
        parts = [self.shards[s].search(qv, k, l) for s in targets if len(self.shards[s])]
        res = merge_topk(parts, k)
        res.evaluations += evals
        res.shards = tuple(targets)
        return res

    # -- persistence -------------------------------------------------------

    def manifest(self, timestamp: float | None = None) -> str:
        p = self.params
        ts = time.time() if timestamp is None else timestamp
        lines = [
            f"kind={self.kind}",
            f"metric={self.metric.label}",
            f"dim={self.dim}",
            f"w={self.w}",
            f"m={self.meta.m if self.meta else 0}",
            f"n_prime={p.n_prime if p else 0}",
            f"r={p.r if p else 0}",
            f"seed={p.seed if p else self.info.get('seed', 0)}",
            f"n_items={self.n_items}",
            f"build_timestamp={ts:.3f}",
            "shard_counts=" + ",".join(str(len(s)) for s in self.shards),
        ]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if self.meta is not None:
            (d / "meta.idx").write_bytes(self.meta.to_bytes())
        for s in self.shards:
            s.sub_hnsw.save(d / f"shard_{s.shard_id}.idx")
        (d / "manifest").write_text(self.manifest())
        return d

    @classmethod
    def load(cls, directory, shards: list[int] | None = None) -> "ShardedIndex":
        """Load an index directory; ``shards`` limits which shard files are read."""
        d = Path(directory)
        man = read_manifest(d / "manifest")
        metric = MetricKind.parse(man["metric"])
        w = int(man["w"])
        meta = None
        if (d / "meta.idx").exists():
            meta = MetaIndex.from_bytes((d / "meta.idx").read_bytes())
        wanted = range(w) if shards is None else shards
        loaded = []
        for i in range(w):
            if i in wanted:
                loaded.append(Shard(i, HnswGraph.load(d / f"shard_{i}.idx")))
            else:
                loaded.append(Shard(i, HnswGraph(int(man["dim"]), metric)))
        params = IndexParams(
            n_prime=int(man.get("n_prime", 0)), m=int(man.get("m", 0)), w=w,
            r=int(man.get("r", 0)), seed=int(man.get("seed", 0)),
        )
        return cls(metric, int(man["dim"]), loaded, meta, params,
                   kind=man.get("kind", "routed"), n_items=int(man.get("n_items", 0)))


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


# -- construction -------------------------------------------------------------


def partition_bottom_layer(meta_graph: HnswGraph, center_weights, w: int,
                           epsilon: float = 0.05, seed: int = 0,
                           weight_override=None) -> np.ndarray:
    """Balanced partition of the routing graph's layer 0, indexed by center id.

    ``weight_override`` replaces the sample-count weights, e.g. with
    :func:`hot_center_weights` when query popularity is skewed.
    """
    ids = meta_graph.ids
    m = len(ids)
    row_of = {int(v): r for r, v in enumerate(ids)}
    A = np.zeros((m, m))
    for v in ids:
        r = row_of[int(v)]
        for u in meta_graph.neighbors(int(v), 0):
            A[r, row_of[u]] += 1.0
            A[row_of[u], r] += 1.0
    weights = np.asarray(center_weights if weight_override is None else weight_override,
                         dtype=np.float64)
    # Weights are stored by center id; reorder to graph rows.
    labels_by_row = partition_graph(A, weights[ids], w, epsilon, seed)
    out = np.empty(m, dtype=np.int64)
    out[ids] = labels_by_row
    return out


def hot_center_weights(meta_graph: HnswGraph, sample_queries, k: int,
                       l: int = DEFAULT_ROUTE_L) -> np.ndarray:
    """How often each center lands in the top-``k`` routing results of ``sample_queries``."""
    counts = np.zeros(len(meta_graph), dtype=np.float64)
    for q in np.asarray(sample_queries):
        res = meta_graph.search(q, k=min(k, len(meta_graph)), l=max(l, k))
        counts[res.ids] += 1.0
    return counts


def assign_items(dataset, meta: MetaIndex, l: int = DEFAULT_ROUTE_L) -> np.ndarray:
    """Shard id for every row of ``dataset``: the partition of its top-1 center.

    The center is found exactly as :meth:`MetaIndex.top_centers` would with
    ``K=1, meta_l=l``, so routing an indexed item reproduces its shard.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 2 or data.shape[1] != meta.meta_graph.dim:
        raise DimensionError(
            f"dataset dimension {data.shape[-1]} does not match meta graph {meta.meta_graph.dim}"
        )
    part = meta.partition_of
    out = np.empty(len(data), dtype=np.int64)
    for i, x in enumerate(data):
        ids, _ = meta.top_centers(x, 1, l)
        out[i] = part[ids[0]]
    return out


def top_r_mips(meta_vectors, dataset, r: int, chunk: int = 8192) -> np.ndarray:
    """Exact top-``r`` inner-product item ids per center, shape (m, r).

    Ties go to the lower item id. ``r`` is clipped to the dataset size.
    """
    C = np.asarray(meta_vectors, dtype=np.float64)
    X = np.asarray(dataset)
    r = min(max(int(r), 0), len(X))
    m = len(C)
    if r == 0:
        return np.empty((m, 0), dtype=np.int64)
    best_s = np.full((m, 0), -np.inf)
    best_i = np.empty((m, 0), dtype=np.int64)
    for lo in range(0, len(X), chunk):
        xs = np.asarray(X[lo: lo + chunk], dtype=np.float64)
        s = C @ xs.T
        ids = np.broadcast_to(np.arange(lo, lo + len(xs), dtype=np.int64), s.shape)
        all_s = np.concatenate([best_s, s], axis=1)
        all_i = np.concatenate([best_i, ids], axis=1)
        order = np.lexsort((all_i, -all_s), axis=1)[:, :r]
        best_s = np.take_along_axis(all_s, order, axis=1)
        best_i = np.take_along_axis(all_i, order, axis=1)
    return best_i


def _build_meta(sample, metric, params, spherical) -> MetaIndex:
    fit = (fit_spherical_kmeans if spherical else fit_kmeans)(
        sample, params.m, params.kmeans_iters, params.seed
    )
    centers = fit.centers
    weights = weight_centers(centers, sample, metric)
    graph = HnswGraph.build(centers, metric, params.M, params.M0, params.build_l,
                            seed=params.seed)
    part = partition_bottom_layer(graph, weights, params.w, params.epsilon, params.seed)
    return MetaIndex(graph, part, params.w, weights)


def _build_shards(data, members, metric, params) -> list:
    shards = []
    for i, ids in enumerate(members):
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        g = HnswGraph(data.shape[1], metric, params.M, params.M0, params.build_l,
                      seed=params.seed + 1 + i, capacity=max(len(ids), 1))
        for item in ids.tolist():
            g.insert(item, data[item])
        shards.append(Shard(i, g))
        logger.debug("shard %d: %d items", i, len(ids))
    return shards


def build_index(dataset, metric: MetricKind, params: IndexParams) -> ShardedIndex:
    """Sample, cluster, build + partition the routing graph, assign, build shards.

    Angular mode normalizes every item first and clusters with spherical
    k-means so that routing centers are unit vectors as well.
    """
    metric = MetricKind(metric)
    if metric is MetricKind.INNER_PRODUCT:
        raise ValueError("use build_index_mips for inner-product search")
    params.validate()
    data = as_matrix(dataset)
    if len(data) < params.n_prime:
        raise ValueError(f"dataset has {len(data)} items, fewer than n_prime={params.n_prime}")
    if metric is MetricKind.ANGULAR:
        data = normalize_rows(data)
    sample = data[sample_dataset(len(data), params.n_prime, params.seed)]
    meta = _build_meta(sample, metric, params, spherical=metric is MetricKind.ANGULAR)
    labels = assign_items(data, meta, params.assign_l)
    members = [np.flatnonzero(labels == i) for i in range(params.w)]
    shards = _build_shards(data, members, metric, params)
    return ShardedIndex(metric, data.shape[1], shards, meta, params, "routed", len(data))


def build_index_mips(dataset, params: IndexParams) -> ShardedIndex:
    """Inner-product variant: spherical centers, raw-item assignment, top-r replicas."""
    params.validate()
    data = as_matrix(dataset)
    if len(data) < params.n_prime:
        raise ValueError(f"dataset has {len(data)} items, fewer than n_prime={params.n_prime}")
    metric = MetricKind.INNER_PRODUCT
    sample = normalize_rows(data[sample_dataset(len(data), params.n_prime, params.seed)])
    meta = _build_meta(sample, metric, params, spherical=True)
    labels = assign_items(data, meta, params.assign_l)
    members = [list(np.flatnonzero(labels == i)) for i in range(params.w)]
    if params.r > 0:
        centers = meta.meta_graph.vectors
        center_ids = meta.meta_graph.ids
        top = top_r_mips(centers, data, params.r)
        for row, c in enumerate(center_ids):
            members[int(meta.partition_of[c])].extend(top[row].tolist())
    shards = _build_shards(data, members, metric, params)
    return ShardedIndex(metric, data.shape[1], shards, meta, params, "routed", len(data))


def build_naive(dataset, metric: MetricKind, w: int, seed: int = 0,
                M: int = DEFAULT_M, M0: int = DEFAULT_M0,
                build_l: int = DEFAULT_BUILD_L) -> ShardedIndex:
    """Baseline layout: random equal split, every query goes to every shard."""
    metric = MetricKind(metric)
    data = as_matrix(dataset)
    if metric is MetricKind.ANGULAR:
        data = normalize_rows(data)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(len(data))
    members = [perm[i::w] for i in range(w)]
    params = IndexParams(n_prime=0, m=0, w=w, seed=seed, M=M, M0=M0, build_l=build_l)
    shards = _build_shards(data, members, metric, params)
    idx = ShardedIndex(metric, data.shape[1], shards, None, None, "naive", len(data))
    idx.info["seed"] = seed
    return idx


def index_files(directory) -> list[str]:
    return sorted(os.listdir(directory))
