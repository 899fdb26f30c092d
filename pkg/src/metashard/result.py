"""Ranked search results and top-k merging."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class QueryResult:
    """Hits sorted by descending score, ties broken by ascending id.

    ``evaluations`` counts similarity computations spent producing the
    result (summed over every graph that was searched).
    """

    ids: np.ndarray
    scores: np.ndarray
    evaluations: int = 0
    shards: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    @classmethod
    def empty(cls) -> "QueryResult":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))


def rank(ids, scores, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sort by (score desc, id asc) and truncate to ``k``."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    if k is not None:
        order = order[:k]
    return ids[order], scores[order]


def merge_topk(partials, k: int) -> QueryResult:
    """Global top-``k`` over partial hit lists.

    ``partials`` is an iterable of ``(ids, scores)`` pairs or
    :class:`QueryResult` objects. The same id may come back from more than
    one shard (replicated items); it is kept once, at its best score.
    """
    all_ids, all_scores, evals = [], [], 0
    for part in partials:
        if isinstance(part, QueryResult):
            evals += part.evaluations
            part = (part.ids, part.scores)
        ids, scores = part
        all_ids.append(np.asarray(ids, dtype=np.int64))
        all_scores.append(np.asarray(scores, dtype=np.float64))
    if not all_ids:
        return QueryResult.empty()
    ids = np.concatenate(all_ids)
    scores = np.concatenate(all_scores)
    ids, scores = rank(ids, scores)
    _, first = np.unique(ids, return_index=True)
    keep = np.sort(first)
    ids, scores = ids[keep][:k], scores[keep][:k]
    return QueryResult(ids, scores, evals)
