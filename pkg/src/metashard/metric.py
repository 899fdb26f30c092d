"""Similarity functions and vector normalization.

Every similarity here follows one convention: larger means more similar.
Euclidean distance is therefore exposed as its negation, and angular
similarity is a plain dot product over vectors the caller has already
normalized to unit length.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from metashard.errors import DimensionError, ZeroNormError


class MetricKind(enum.IntEnum):
    # The integer codes are part of the on-disk format and the kernel ABI.
    EUCLIDEAN_NEG = 0
    ANGULAR = 1
    INNER_PRODUCT = 2

    @classmethod
    def parse(cls, name: "str | MetricKind") -> "MetricKind":
        """Accept an enum member, its name, or a CLI alias."""
        if isinstance(name, MetricKind):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "euclidean": cls.EUCLIDEAN_NEG,
            "euclidean_neg": cls.EUCLIDEAN_NEG,
            "l2": cls.EUCLIDEAN_NEG,
            "angular": cls.ANGULAR,
            "cosine": cls.ANGULAR,
            "inner_product": cls.INNER_PRODUCT,
            "ip": cls.INNER_PRODUCT,
            "mips": cls.INNER_PRODUCT,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown metric {name!r}") from None

    @property
    def label(self) -> str:
        return {0: "euclidean", 1: "angular", 2: "inner_product"}[int(self)]


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a 1-d float32 array, checking finiteness and ``dim``."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or Inf")
    return arr


def as_matrix(items, dim: int | None = None) -> np.ndarray:
    """Coerce a batch of vectors to a C-contiguous (n, d) float32 array."""
    arr = np.ascontiguousarray(items, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"expected an (n, d) array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("items contain NaN or Inf")
    return arr


def score(metric: MetricKind, q, x) -> float:
    """Similarity of ``q`` and ``x`` under ``metric``, accumulated in float64.

    Raises:
        DimensionError: if the vectors differ in length.
    """
    q64 = np.asarray(q, dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    if q64.shape != x64.shape:
        raise DimensionError(f"dimension mismatch: {q64.shape} vs {x64.shape}")
    if MetricKind(metric) is MetricKind.EUCLIDEAN_NEG:
        diff = q64 - x64
        return -math.sqrt(float(np.dot(diff, diff)))
    return float(np.dot(q64, x64))


def score_many(metric: MetricKind, q, items: np.ndarray) -> np.ndarray:
    """Vectorized :func:`score` of one query against every row of ``items``."""
    q64 = np.asarray(q, dtype=np.float64)
    x64 = np.asarray(items, dtype=np.float64)
    if x64.ndim != 2 or x64.shape[1] != q64.shape[0]:
        raise DimensionError(f"dimension mismatch: {q64.shape} vs {x64.shape}")
    if MetricKind(metric) is MetricKind.EUCLIDEAN_NEG:
        diff = x64 - q64
        return -np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return x64 @ q64


def normalize(x) -> np.ndarray:
    """Scale ``x`` to unit Euclidean norm (returned as float32).

    Raises:
        ZeroNormError: for the zero vector.
    """
    x64 = np.asarray(x, dtype=np.float64)
    norm = math.sqrt(float(np.dot(x64, x64)))
    if norm == 0.0:
        raise ZeroNormError("cannot normalize a zero vector")
    return (x64 / norm).astype(np.float32)


def normalize_rows(items: np.ndarray) -> np.ndarray:
    """Row-wise :func:`normalize` for an (n, d) batch."""
    x64 = np.asarray(items, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ZeroNormError(f"row {bad} is a zero vector")
    return (x64 / norms[:, None]).astype(np.float32)
