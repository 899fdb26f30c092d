"""Exact top-k by linear scan."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from metashard.metric import MetricKind, as_matrix, score_many


@dataclass
class GroundTruth:
    """Exact neighbors: ``ids[i]`` ranks the items for query ``i`` best-first."""

    ids: np.ndarray
    scores: np.ndarray
    metric: MetricKind

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def _approx_scores(metric, Q, X, x_sq):
    if metric is MetricKind.EUCLIDEAN_NEG:
        q_sq = np.einsum("ij,ij->i", Q, Q)[:, None]
        d2 = q_sq - 2.0 * (Q @ X.T) + x_sq[None, :]
        return -np.sqrt(np.maximum(d2, 0.0))
    return Q @ X.T


def ground_truth(dataset, queries, k: int, metric=MetricKind.EUCLIDEAN_NEG,
                 chunk: int = 256) -> GroundTruth:
    """Exact top-``k`` of every query, ties broken by the lower item id.

    A fast matrix-product pass shortlists candidates with a safety margin;
    the shortlist is then rescored exactly as :func:`score_many` would.
    ``k`` larger than the dataset is clipped with a warning.
    """
    metric = MetricKind(metric)
    X = as_matrix(dataset).astype(np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(X)
    if k > n:
        warnings.warn(f"k={k} exceeds the dataset size {n}; clipping", stacklevel=2)
        k = n
    out_i = np.empty((len(Q), k), dtype=np.int64)
    out_s = np.empty((len(Q), k), dtype=np.float64)
    if k == 0:
        return GroundTruth(out_i, out_s, metric)
    x_sq = np.einsum("ij,ij->i", X, X)
    max_norm = float(np.sqrt(x_sq.max())) if n else 0.0
    for lo in range(0, len(Q), chunk):
        block = Q[lo: lo + chunk]
        approx = _approx_scores(metric, block, X, x_sq)
        kth = -np.partition(-approx, k - 1, axis=1)[:, k - 1]
        for j, q in enumerate(block):
            scale = (max_norm + float(np.linalg.norm(q))) ** 2
            margin = 1e-9 * scale + 1e-9
            if metric is MetricKind.EUCLIDEAN_NEG:
                # sqrt amplifies absolute error near zero distance
                margin = np.sqrt(margin) * 4 + margin
            cand = np.flatnonzero(approx[j] >= kth[j] - margin)
            s = score_many(metric, q, X[cand])
            order = np.lexsort((cand, -s))[:k]
            out_i[lo + j] = cand[order]
            out_s[lo + j] = s[order]
    return GroundTruth(out_i, out_s, metric)
