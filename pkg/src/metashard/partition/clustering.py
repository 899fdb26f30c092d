"""Sampling and Lloyd-style clustering used to pick the routing centers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from metashard.errors import SampleTooLargeError, TooFewPointsError
from metashard.metric import MetricKind


def sample_dataset(n_items: int, n_prime: int, seed: int) -> np.ndarray:
    """Sorted row indices of ``n_prime`` items drawn without replacement."""
    if n_prime > n_items:
        raise SampleTooLargeError(f"cannot sample {n_prime} of {n_items} items")
    if n_prime < 0:
        raise ValueError("n_prime must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.sort(rng.choice(n_items, size=n_prime, replace=False)).astype(np.int64)


@dataclass
class Clustering:
    centers: np.ndarray
    labels: np.ndarray
    # Objective recorded at each assignment step: within-cluster sum of
    # squares for k-means, total cosine similarity for the spherical variant.
    history: list = field(default_factory=list)
    iterations: int = 0


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    d = p2 - 2.0 * points @ centers.T + c2
    np.maximum(d, 0.0, out=d)
    return d


def _plusplus(points: np.ndarray, m: int, rng: np.random.Generator, spherical: bool) -> np.ndarray:
    """k-means++ seeding; returns indices of the chosen points."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    if spherical:
        closest = np.maximum(1.0 - points @ points[chosen[0]], 0.0)
    else:
        closest = _sq_dists(points, points[chosen[:1]])[:, 0]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, m):
        weights = np.where(taken, 0.0, closest)
        total = weights.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            # Everything left coincides with a chosen center.
            nxt = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(nxt)
        taken[nxt] = True
        if spherical:
            d = np.maximum(1.0 - points @ points[nxt], 0.0)
        else:
            d = _sq_dists(points, points[nxt: nxt + 1])[:, 0]
        np.minimum(closest, d, out=closest)
    return np.asarray(chosen, dtype=np.int64)


def _check(points, m):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    if m < 1:
        raise ValueError("m must be positive")
    if len(pts) < m:
        raise TooFewPointsError(f"{len(pts)} points cannot seed {m} centers")
    return pts


def fit_kmeans(points, m: int, iters: int = 25, seed: int = 0) -> Clustering:
    """Lloyd iterations from k-means++ seeding, Euclidean objective.

    An empty cluster is re-seeded at the point currently farthest from its
    own center, which never increases the objective.
    """
    pts = _check(points, m)
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = pts[_plusplus(pts, m, rng, spherical=False)].copy()
    history = []
    labels = np.full(len(pts), -1, dtype=np.int64)
    it = 0
    for it in range(1, max(iters, 1) + 1):
        d = _sq_dists(pts, centers)
        new_labels = np.argmin(d, axis=1)
        cost = d[np.arange(len(pts)), new_labels]
        history.append(float(cost.sum()))
        new_labels = _reseed_empty(new_labels, cost, m)
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, pts)
        counts = np.bincount(labels, minlength=m).astype(np.float64)
        centers = sums / counts[:, None]
        if converged:
            break
    return Clustering(centers.astype(np.float32), labels, history, it)


def _reseed_empty(labels: np.ndarray, cost: np.ndarray, m: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=m)
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return labels
    labels = labels.copy()
    # Farthest points first; skip points whose cluster would empty out.
    for p in np.argsort(-cost, kind="stable"):
        if len(empty) == 0:
            break
        if counts[labels[p]] <= 1:
            continue
        counts[labels[p]] -= 1
        labels[p] = empty[0]
        counts[empty[0]] += 1
        empty = empty[1:]
    return labels


def fit_spherical_kmeans(points, m: int, iters: int = 25, seed: int = 0) -> Clustering:
    """Spherical k-means: assign by max dot product, centers are normalized means.

    ``points`` should already have unit norm. Clusters whose mean vanishes
    (or that end up empty) are re-seeded at the least similar point.
    """
    pts = _check(points, m)
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = pts[_plusplus(pts, m, rng, spherical=True)].copy()
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    history = []
    labels = np.full(len(pts), -1, dtype=np.int64)
    it = 0
    for it in range(1, max(iters, 1) + 1):
        sims = pts @ centers.T
        new_labels = np.argmax(sims, axis=1)
        best = sims[np.arange(len(pts)), new_labels]
        history.append(float(best.sum()))
        new_labels = _reseed_empty(new_labels, -best, m)
        sums = np.zeros_like(centers)
        np.add.at(sums, new_labels, pts)
        norms = np.linalg.norm(sums, axis=1)
        dead = np.flatnonzero(norms <= 1e-12)
        if len(dead):
            # Zero-mean cluster: move its least similar members elsewhere.
            order = np.argsort(best, kind="stable")
            used = set()
            for c in dead:
                for p in order:
                    if p not in used and new_labels[p] != c:
                        used.add(int(p))
                        sums[c] = pts[p]
                        break
            norms = np.linalg.norm(sums, axis=1)
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        centers = sums / norms[:, None]
        if converged:
            break
    return Clustering(centers.astype(np.float32), labels, history, it)


def kmeans(points, m: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """``m`` k-means centers of ``points`` as an (m, d) float32 array."""
    return fit_kmeans(points, m, iters, seed).centers


def spherical_kmeans(points, m: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """``m`` unit-norm spherical k-means centers of ``points``."""
    return fit_spherical_kmeans(points, m, iters, seed).centers


def best_center(centers: np.ndarray, items: np.ndarray, metric: MetricKind,
                chunk: int = 16384) -> np.ndarray:
    """Index of each item's most similar center by exhaustive scan."""
    c64 = np.asarray(centers, dtype=np.float64)
    out = np.empty(len(items), dtype=np.int64)
    for lo in range(0, len(items), chunk):
        x = np.asarray(items[lo: lo + chunk], dtype=np.float64)
        if MetricKind(metric) is MetricKind.EUCLIDEAN_NEG:
            out[lo: lo + chunk] = np.argmin(_sq_dists(x, c64), axis=1)
        else:
            out[lo: lo + chunk] = np.argmax(x @ c64.T, axis=1)
    return out


def weight_centers(centers: np.ndarray, sample: np.ndarray, metric: MetricKind) -> np.ndarray:
    """Number of sample items whose best center is each center."""
    labels = best_center(centers, sample, metric)
    return np.bincount(labels, minlength=len(centers)).astype(np.float64)
