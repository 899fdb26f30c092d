"""How strongly exact inner-product results favor large-norm items."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metashard.bench.groundtruth import ground_truth
from metashard.metric import MetricKind


@dataclass
class NormBiasReport:
    # bucket b covers norm percentiles [edges[b], edges[b + 1])
    edges: np.ndarray
    shares: np.ndarray
    total_results: int

    def top_share(self) -> float:
        """Share taken by the highest-norm bucket."""
        return float(self.shares[-1])

    def to_lines(self) -> str:
        lines = [f"total_results={self.total_results}"]
        for b, share in enumerate(self.shares):
            lines.append(f"bucket_{self.edges[b]:g}_{self.edges[b + 1]:g}={share:.6f}")
        return "\n".join(lines) + "\n"


def norm_percentile_bucket(norms: np.ndarray, buckets: int) -> np.ndarray:
    """Bucket of each item by the rank of its norm (ties by lower index first)."""
    n = len(norms)
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.lexsort((np.arange(n), norms))] = np.arange(n)
    return np.minimum(ranks * buckets // max(n, 1), buckets - 1)


def mips_norm_bias_report(dataset, queries, k: int = 10, buckets: int = 20) -> NormBiasReport:
    """Share of exact top-``k`` inner-product results per norm-percentile bucket.

    Results are pooled over all queries without deduplication, so an item
    returned for many queries counts once per query.
    """
    X = np.asarray(dataset, dtype=np.float64)
    gt = ground_truth(X, queries, k, MetricKind.INNER_PRODUCT)
    bucket = norm_percentile_bucket(np.linalg.norm(X, axis=1), buckets)
    counts = np.bincount(bucket[gt.ids.ravel()], minlength=buckets).astype(np.float64)
    total = int(gt.ids.size)
    edges = np.linspace(0.0, 100.0, buckets + 1)
    return NormBiasReport(edges, counts / max(total, 1), total)
