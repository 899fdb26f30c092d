"""Query replay and measurement.

A *target* is anything with ``w`` (shard count) and
``search(q, K=, k=, l=, meta_l=)`` returning a :class:`QueryResult` whose
``shards`` lists the shards that were contacted. Both
:class:`~metashard.partition.ShardedIndex` (in-process) and
:class:`~metashard.cluster.client.ClusterClient` qualify.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass

import numpy as np

from metashard.bench.groundtruth import GroundTruth
from metashard.bench.metrics import BenchReport, percentile, precision
from metashard.errors import ConnectivityError, MetashardError

logger = logging.getLogger(__name__)


@dataclass
class QueryRecord:
    index: int
    latency_ms: float
    precision: float | None
    access: int
    evaluations: int
    ok: bool
    finished: float


def _replay(target, queries, K, k, l, meta_l, concurrency, duration, truth,
            min_queries=100):
    """Issue queries from ``concurrency`` threads; returns records + wall time."""
    n = len(queries)
    counter = iter(range(10**12))
    lock = threading.Lock()
    records: list[QueryRecord] = []
    t0 = time.perf_counter()
    deadline = t0 + duration if duration else None
    target_count = max(n, min_queries) if duration is None else None

    def next_index():
        with lock:
            i = next(counter)
        if target_count is not None and i >= target_count:
            return None
        if deadline is not None and time.perf_counter() >= deadline and i >= min_queries:
            return None
        return i

    def worker():
        while True:
            i = next_index()
            if i is None:
                return
            qi = i % n
            start = time.perf_counter()
            try:
                res = target.search(queries[qi], K=K, k=k, l=l, meta_l=meta_l)
            except ConnectivityError:
                raise
            except MetashardError as exc:
                logger.debug("query %d failed: %s", qi, exc)
                rec = QueryRecord(qi, (time.perf_counter() - start) * 1e3, None, 0, 0, False,
                                  time.perf_counter())
            else:
                end = time.perf_counter()
                p = precision(res.ids, truth.ids[qi], k) if truth is not None else None
                rec = QueryRecord(qi, (end - start) * 1e3, p, len(res.shards),
                                  int(res.evaluations), True, end)
            with lock:
                records.append(rec)

    errors: list[BaseException] = []

    def guarded():
        try:
            worker()
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    threads = [threading.Thread(target=guarded, daemon=True) for _ in range(max(concurrency, 1))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return records, time.perf_counter() - t0


def run_benchmark(target, queries, K: int = 1, k: int = 10, l: int = 100,
                  concurrency: int = 1, duration: float | None = None,
                  truth: GroundTruth | None = None, meta_l: int | None = None,
                  min_queries: int = 100) -> BenchReport:
    """Replay ``queries`` against ``target`` and summarize.

    Without ``duration`` every query runs once (and the set is cycled up
    to ``min_queries`` so the p90 rests on enough samples). With
    ``duration`` seconds the set is cycled until time runs out.

    Raises:
        ConnectivityError: the cluster behind ``target`` cannot be reached.
    """
    queries = np.asarray(queries)
    if truth is not None and len(truth) < len(queries):
        raise ValueError("ground truth covers fewer queries than supplied")
    records, wall = _replay(target, queries, K, k, l, meta_l, concurrency, duration, truth,
                            min_queries)
    ok = [r for r in records if r.ok]
    lat = [r.latency_ms for r in ok]
    # Precision over the first answer to each distinct query.
    first: dict[int, float] = {}
    for r in sorted(ok, key=lambda r: r.finished):
        if r.precision is not None:
            first.setdefault(r.index, r.precision)
    w = target.w
    return BenchReport(
        precision_mean=float(np.mean(list(first.values()))) if first else float("nan"),
        access_rate_mean=float(np.mean([r.access for r in ok]) / w) if ok else float("nan"),
        throughput=len(ok) / wall if wall > 0 else float("nan"),
        latency_p50=percentile(lat, 50),
        latency_p90=percentile(lat, 90),
        distance_computations_per_query=float(np.mean([r.evaluations for r in ok])) if ok else float("nan"),
        queries=len(records),
        failed=len(records) - len(ok),
        config={"K": K, "k": k, "l": l, "concurrency": concurrency,
                "meta_l": meta_l if meta_l is not None else "default",
                "duration": duration if duration else "single-pass", "w": w},
    )


def access_rate(index, queries, K: int, meta_l: int | None = None) -> float:
    """Mean fraction of shards that ``route`` selects."""
    return float(np.mean([len(index.route(q, K, meta_l)) for q in queries]) / index.w)


def naive_matching_precision(naive, queries, truth, k: int, target: float,
                             ls=(10, 15, 20, 30, 40, 50, 60, 80, 100, 150, 200)):
    """Cheapest naive search width whose precision reaches ``target``.

    Returns ``(l, report)`` or ``(None, last_report)`` when no width does.
    """
    report = None
    for l in ls:
        report = run_benchmark(naive, queries, K=naive.w, k=k, l=l, truth=truth,
                               min_queries=len(queries))
        if report.precision_mean >= target:
            return l, report
    return None, report
