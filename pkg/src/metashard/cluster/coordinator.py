"""Coordinator: route, scatter through the broker, gather partials, merge.

Partial results arrive on the coordinator's own listener over direct
connections from executors. The same listener accepts client queries
(``CLIENT_QUERY`` frames) and answers each with a ``CLIENT_RESULT``.

A partial is merged only if its epoch is the current lease epoch of a
live executor for that shard, so an instance that was declared dead and
replaced cannot contribute results.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from metashard.cluster import wire
from metashard.cluster.broker import BrokerClient
from metashard.cluster.config import ClusterConfig
from metashard.cluster.executor import parse_role
from metashard.cluster.net import Connection, FrameServer
from metashard.cluster.registry import LeaseKeeper, RegistryClient
from metashard.errors import (
    ConnectivityError,
    MetashardError,
    PartialTimeoutError,
    ProtocolError,
    ShardUnavailableError,
)
from metashard.metric import MetricKind, as_vector, normalize
from metashard.partition.index import MetaIndex, read_manifest
from metashard.result import QueryResult, merge_topk

logger = logging.getLogger(__name__)


class _Gather:
    __slots__ = ("qid", "k", "expected", "partials", "callback", "done", "meta_evals",
                 "shards", "lock")

    def __init__(self, qid, k, expected, callback, meta_evals, shards):
        self.qid = qid
        self.k = k
        self.expected = set(expected)
        self.partials: dict[int, wire.PartialResult] = {}
        self.callback = callback
        self.done = False
        self.meta_evals = meta_evals
        self.shards = shards
        self.lock = threading.Lock()

    def finish(self):
        """Claim the right to fire the callback; True exactly once."""
        with self.lock:
            if self.done:
                return False
            self.done = True
            return True


class LeaseView:
    """Cached view of live executor leases: shard -> {epoch, ...}."""

    def __init__(self, registry: RegistryClient, refresh_s: float = 0.2) -> None:
        self._registry = registry
        self.refresh_s = refresh_s
        self._epochs: dict[int, set[int]] = {}
        self._stamp = 0.0
        self._lock = threading.Lock()

    def refresh(self, min_age: float = 0.0) -> None:
        with self._lock:
            if time.monotonic() - self._stamp < min_age:
                return
            leases = self._registry.list("executor/")
            epochs: dict[int, set[int]] = {}
            for lease in leases:
                _, nums = parse_role(lease["role"])
                if nums:
                    epochs.setdefault(nums[0], set()).add(int(lease["epoch"]))
            self._epochs = epochs
            self._stamp = time.monotonic()

    def live(self, shard: int) -> set[int]:
        if time.monotonic() - self._stamp > self.refresh_s:
            self.refresh(self.refresh_s)
        return self._epochs.get(shard, set())


class Coordinator(FrameServer):
    """Routes queries over a meta index and gathers shard results."""

    def __init__(self, config: ClusterConfig, meta: MetaIndex | None = None,
                 coord_id: int = 0, metric: MetricKind | None = None, w: int | None = None,
                 dim: int | None = None, workers: int = 4) -> None:
        """Without ``metric`` and ``w`` the index manifest and meta graph are
        read from ``config.index_dir``. A coordinator with no meta graph
        sends every query to all shards."""
        super().__init__(config.bind_host, 0)
        self.config = config
        self.coord_id = coord_id
        self.role = f"coordinator/{coord_id}"
        if metric is None or w is None:
            d = Path(config.index_dir)
            man = read_manifest(d / "manifest")
            metric = MetricKind.parse(man["metric"])
            w = int(man["w"])
            dim = int(man["dim"])
            meta = MetaIndex.from_bytes((d / "meta.idx").read_bytes()) if (d / "meta.idx").exists() else None
        self.meta = meta
        self.metric = MetricKind(metric)
        self.w = int(w)
        self.dim = dim if dim is not None else (meta.meta_graph.dim if meta else None)
        self.epoch = 0
        self._ids = itertools.count(1)
        self._pending: dict[int, _Gather] = {}
        self._pending_lock = threading.Lock()
        self._timers: list = []
        self._timer_cv = threading.Condition()
        self._broker = BrokerClient(config.broker)
        self._registry = RegistryClient(config.registry)
        self.leases = LeaseView(self._registry)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="coord")
        self._lease: LeaseKeeper | None = None
        self.rejected_stale = 0
        self.completed = 0
        self.failed = 0

    # -- lifecycle -------------------------------------------------------

    def start(self, register: bool = True) -> "Coordinator":
        super().start()
        threading.Thread(target=self._timer_loop, daemon=True).start()
        if register:
            self._lease = LeaseKeeper(
                self.config.registry, self.role, self.config.lease_ms, self.config.renew_ms,
                {"addr": self.address, "w": self.w, "dim": self.dim, "metric": self.metric.label},
                on_lost=self._on_lost,
            )
            self.epoch = self._lease.acquire()
        return self

    def _on_lost(self) -> None:
        logger.error("%s lost its lease; shutting down", self.role)
        self.stopping = True

    def stop(self) -> None:
        super().stop()
        with self._timer_cv:
            self._timer_cv.notify_all()
        if self._lease is not None:
            self._lease.release()
        self._pool.shutdown(wait=False)
        self._broker.close()
        self._registry.close()

    # -- query path --------------------------------------------------------

    def prepare(self, q) -> np.ndarray:
        qv = as_vector(q, self.dim)
        if self.metric is MetricKind.ANGULAR:
            qv = normalize(qv)
        return qv

    def route(self, qv, K: int, meta_l: int | None = None) -> tuple[list[int], int]:
        if self.meta is None:
            return list(range(self.w)), 0
        centers, evals = self.meta.top_centers(qv, K, meta_l)
        return sorted({int(self.meta.partition_of[c]) for c in centers}), int(evals)

    def execute_async(self, q, K: int | None = None, k: int | None = None, callback=None,
                      l: int | None = None, timeout: float | None = None,
                      meta_l: int | None = None) -> int:
        """Start a query; ``callback(result_or_exception)`` fires exactly once.

        Returns the coordinator-assigned query id.
        """
        cfg = self.config
        K = cfg.K if K is None else K
        k = cfg.k if k is None else k
        l = cfg.search_l if l is None else l
        timeout = cfg.gather_timeout_ms / 1000.0 if timeout is None else timeout
        qid = next(self._ids)
        try:
            qv = self.prepare(q)
            shards, meta_evals = self.route(qv, K, meta_l)
            missing = [s for s in shards if not self.leases.live(s)]
            if missing:
                self.leases.refresh(0.02)
                missing = [s for s in shards if not self.leases.live(s)]
            if missing:
                raise ShardUnavailableError(f"no live executor for shards {missing}")
        except MetashardError as exc:
            self._fire(callback, exc)
            return qid
        g = _Gather(qid, k, shards, callback, meta_evals, tuple(shards))
        with self._pending_lock:
            self._pending[qid] = g
        self._schedule(time.monotonic() + timeout, qid)
        req = wire.QueryRequest(qid, qv.astype(np.float32), k, l, self.address, self.epoch)
        payload = wire.payload_of(wire.encode_request(req))
        try:
            self._broker.publish_many(shards, [payload] * len(shards))
        except ConnectivityError as exc:
            self._abort(qid, exc)
        return qid

    def execute(self, q, K: int | None = None, k: int | None = None, l: int | None = None,
                timeout: float | None = None, meta_l: int | None = None) -> QueryResult:
        """Blocking form of :meth:`execute_async`.

        Raises:
            PartialTimeoutError: not every routed shard answered in time.
            ShardUnavailableError: a routed shard has no live executor.
        """
        box: list = []
        ev = threading.Event()

        def done(r):
            box.append(r)
            ev.set()

        self.execute_async(q, K, k, done, l, timeout, meta_l)
        ev.wait()
        out = box[0]
        if isinstance(out, BaseException):
            raise out
        return out

    def _fire(self, callback, value) -> None:
        if isinstance(value, BaseException):
            self.failed += 1
        else:
            self.completed += 1
        if callback is None:
            return
        try:
            callback(value)
        except Exception:  # a faulty callback must not kill the gather thread
            logger.exception("query callback raised")

    def _abort(self, qid: int, exc: BaseException) -> None:
        with self._pending_lock:
            g = self._pending.pop(qid, None)
        if g is not None and g.finish():
            self._fire(g.callback, exc)

    def accept_partial(self, part: wire.PartialResult) -> bool:
        """Add one partial to its gather; returns False if it was rejected."""
        with self._pending_lock:
            g = self._pending.get(part.query_id)
        if g is None or part.shard_id not in g.expected:
            return False
        live = self.leases.live(part.shard_id)
        if part.epoch not in live:
            self.leases.refresh(0.02)
            live = self.leases.live(part.shard_id)
        if part.epoch not in live:
            self.rejected_stale += 1
            logger.info("rejected partial for query %d from shard %d with stale epoch %d",
                        part.query_id, part.shard_id, part.epoch)
            return False
        with g.lock:
            if g.done or part.shard_id in g.partials:
                return False
            g.partials[part.shard_id] = part
            complete = len(g.partials) == len(g.expected)
        if complete:
            with self._pending_lock:
                self._pending.pop(g.qid, None)
            if g.finish():
                self._fire(g.callback, self._merge(g))
        return True

    def _merge(self, g: _Gather) -> QueryResult:
        parts = [(p.ids, p.scores) for p in g.partials.values()]
        res = merge_topk(parts, g.k)
        res.evaluations = g.meta_evals + sum(int(p.evaluations or 0) for p in g.partials.values())
        res.shards = g.shards
        return res

    # -- timeouts ----------------------------------------------------------

    def _schedule(self, deadline: float, qid: int) -> None:
        with self._timer_cv:
            heapq.heappush(self._timers, (deadline, qid))
            self._timer_cv.notify()

    def _timer_loop(self) -> None:
        while not self.stopping:
            with self._timer_cv:
                now = time.monotonic()
                due = []
                while self._timers and self._timers[0][0] <= now:
                    due.append(heapq.heappop(self._timers)[1])
                if not due:
                    wait = self._timers[0][0] - now if self._timers else 0.5
                    self._timer_cv.wait(min(wait, 0.5))
                    continue
            for qid in due:
                with self._pending_lock:
                    g = self._pending.pop(qid, None)
                if g is None:
                    continue
                with g.lock:
                    got = list(g.partials.values())
                    missing = g.expected - set(g.partials)
                if g.finish():
                    self._fire(g.callback, PartialTimeoutError(qid, got, missing))

    # -- network -----------------------------------------------------------

    def dispatch(self, payload: bytes, conn: Connection) -> None:
        ftype = payload[0] if payload else -1
        if ftype == wire.PARTIAL_RESULT:
            try:
                self.accept_partial(wire.decode_partial(payload))
            except ProtocolError as exc:
                logger.warning("bad partial dropped: %s", exc)
        elif ftype == wire.CLIENT_QUERY:
            cq = wire.decode_client_query(payload)
            self._pool.submit(self._serve_client, cq, conn)
        else:
            raise ProtocolError(f"unexpected frame type {ftype}")

    def _serve_client(self, cq: wire.ClientQuery, conn: Connection) -> None:
        def done(r):
            if isinstance(r, BaseException):
                out = wire.ClientResult(cq.query_id, False, np.empty(0, np.int64),
                                        np.empty(0), error=f"{type(r).__name__}: {r}")
            else:
                out = wire.ClientResult(cq.query_id, True, r.ids, r.scores,
                                        int(r.evaluations), tuple(r.shards))
            conn.send(wire.encode_client_result(out))

        meta_l = None if cq.meta_l < 0 else cq.meta_l
        self.execute_async(cq.vector, cq.K, cq.k, done, cq.l, None, meta_l)
