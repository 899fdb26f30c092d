"""Seeded synthetic datasets standing in for the large public corpora.

All generators return float32 arrays and are fully determined by ``seed``.
Queries come from the same distribution as the items but from an
independent stream, so they are never copies of indexed items.
"""
from __future__ import annotations

import numpy as np


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def uniform(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Points uniform in the unit hypercube."""
    return _rng(seed).random((n, dim), dtype=np.float32)


def gaussian_mixture(n: int, dim: int, n_clusters: int = 64, spread: float = 2.0,
                     cluster_std: float = 1.0, seed: int = 0,
                     n_queries: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs with centers drawn from N(0, spread^2 I).

    Cluster sizes are uneven (Dirichlet proportions) so shard balancing has
    something to do. Returns ``(items, queries)``.
    """
    rng = _rng(seed)
    centers = rng.normal(0.0, spread, (n_clusters, dim))
    props = rng.dirichlet(np.full(n_clusters, 2.0))

    def draw(count: int, g: np.random.Generator) -> np.ndarray:
        lab = g.choice(n_clusters, size=count, p=props)
        return (centers[lab] + g.normal(0.0, cluster_std, (count, dim))).astype(np.float32)

    items = draw(n, rng)
    queries = draw(n_queries, _rng(seed + 7919)) if n_queries else np.empty((0, dim), np.float32)
    return items, queries


def lognormal_mips(n: int, dim: int, n_clusters: int = 64, sigma: float = 0.5,
                   direction_std: float = 0.6, seed: int = 0,
                   n_queries: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clustered directions scaled by log-normal norms (``ln ||x|| ~ N(0, sigma^2)``).

    Queries share the direction mixture but have unit norm. Returns
    ``(items, queries)``.
    """
    rng = _rng(seed)
    axes = rng.normal(0.0, 1.0, (n_clusters, dim))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)

    def directions(count: int, g: np.random.Generator) -> np.ndarray:
        lab = g.integers(0, n_clusters, count)
        v = axes[lab] + g.normal(0.0, direction_std / np.sqrt(dim), (count, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    norms = rng.lognormal(0.0, sigma, n)
    items = (directions(n, rng) * norms[:, None]).astype(np.float32)
    queries = (directions(n_queries, _rng(seed + 7919)).astype(np.float32)
               if n_queries else np.empty((0, dim), np.float32))
    return items, queries


def dominant_norm(n: int, dim: int, factor: float = 10.0, seed: int = 0) -> np.ndarray:
    """Random unit directions; item 0 is scaled ``factor`` times larger."""
    rng = _rng(seed)
    v = rng.normal(0.0, 1.0, (n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[0] *= factor
    return v.astype(np.float32)
