"""Distributed approximate nearest-neighbor search over a routed, sharded
proximity-graph index."""
from metashard.errors import MetashardError
from metashard.hnsw import BACKEND, HnswGraph
from metashard.metric import MetricKind
from metashard.partition import IndexParams, ShardedIndex, build_index, build_index_mips, build_naive
from metashard.result import QueryResult, merge_topk

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "HnswGraph", "IndexParams", "MetashardError", "MetricKind", "QueryResult",
    "ShardedIndex", "__version__", "build_index", "build_index_mips", "build_naive",
    "merge_topk",
]
