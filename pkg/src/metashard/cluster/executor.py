"""Shard executor: consumes query requests for one shard and replies directly.

An executor holds the lease ``executor/<shard>/<replica>``, joins the
broker group for its shard's topic, searches its sub-graph for every
request and sends the partial result straight to the coordinator named
in ``reply_to``. A control port answers ``ping`` and ``stats`` and, in
benchmark mode, accepts a ``slowdown`` factor that stretches every
request's service time.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from pathlib import Path

from metashard.cluster import wire
from metashard.cluster.broker import Subscription
from metashard.cluster.config import ClusterConfig
from metashard.cluster.net import Connection, FrameServer, connect, reply
from metashard.cluster.registry import LeaseKeeper
from metashard.errors import ConnectivityError, LeaseHeldError, ProtocolError
from metashard.hnsw import HnswGraph

logger = logging.getLogger(__name__)


def executor_role(shard: int, replica: int) -> str:
    return f"executor/{shard}/{replica}"


def parse_role(role: str) -> tuple[str, list[int]]:
    kind, *rest = role.split("/")
    return kind, [int(x) for x in rest if x.isdigit()]


class ReplySender:
    """Cached outbound connections, one per coordinator address."""

    def __init__(self) -> None:
        self._socks: dict[str, object] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def send(self, addr: str, data: bytes) -> bool:
        with self._guard:
            lock = self._locks.setdefault(addr, threading.Lock())
        with lock:
            for attempt in (0, 1):
                sock = self._socks.get(addr)
                try:
                    if sock is None:
                        sock = self._socks[addr] = connect(addr, timeout=1.0)
                    sock.sendall(data)
                    return True
                except (OSError, ConnectivityError) as exc:
                    self._socks.pop(addr, None)
                    if sock is not None:
                        try:
                            sock.close()
                        except OSError:
                            pass
                    if attempt == 1:
                        logger.warning("reply to %s dropped: %s", addr, exc)
        return False

    def close(self) -> None:
        with self._guard:
            for s in self._socks.values():
                try:
                    s.close()
                except OSError:
                    pass
            self._socks.clear()


class _ControlServer(FrameServer):
    def __init__(self, executor: "Executor", host: str) -> None:
        super().__init__(host, 0)
        self.executor = executor

    def dispatch(self, payload: bytes, conn: Connection) -> None:
        msg, _ = wire.decode_control(payload)
        ex = self.executor
        op = msg.get("op")
        if op == "ping":
            reply(conn, {"ok": True, "role": ex.role, "epoch": ex.epoch})
        elif op == "stats":
            reply(conn, {"ok": True, **ex.stats()})
        elif op == "slowdown":
            if not ex.config.benchmark_mode:
                reply(conn, {"ok": False, "error": "fault injection requires benchmark_mode=true"})
                return
            factor = float(msg.get("factor", 1.0))
            if factor < 1.0:
                reply(conn, {"ok": False, "error": "slowdown factor must be >= 1"})
                return
            ex.slowdown = factor
            logger.warning("%s: slowdown set to %.2fx", ex.role, factor)
            reply(conn, {"ok": True, "factor": factor})
        else:
            reply(conn, {"ok": False, "error": f"unknown op {op!r}"})


class Executor:
    """Serves one shard replica. ``start`` returns once the executor is live."""

    def __init__(self, config: ClusterConfig, shard: int, replica: int = 0,
                 graph: HnswGraph | None = None, host_label: str = "local") -> None:
        self.config = config
        self.shard = shard
        self.replica = replica
        self.role = executor_role(shard, replica)
        self.host_label = host_label
        self._graph = graph
        self.slowdown = 1.0
        self.processed = 0
        self.evaluations = 0
        self.busy_s = 0.0
        self.epoch = 0
        self._stop = threading.Event()
        self.stopped = threading.Event()
        self._threads: list[threading.Thread] = []
        self._subs: list[Subscription] = []
        self._replies = ReplySender()
        self._control: _ControlServer | None = None
        self._lease: LeaseKeeper | None = None
        self._stats_lock = threading.Lock()

    @property
    def graph(self) -> HnswGraph:
        if self._graph is None:
            path = Path(self.config.index_dir) / f"shard_{self.shard}.idx"
            self._graph = HnswGraph.load(path)
        return self._graph

    def start(self) -> "Executor":
        """Load the shard, take the lease, join the group, start workers.

        Raises:
            LeaseHeldError: another live instance already serves this role.
        """
        graph = self.graph
        cfg = self.config
        self._control = _ControlServer(self, cfg.bind_host).start()
        meta = {"pid": os.getpid(), "control": self._control.address, "host": self.host_label,
                "shard": self.shard, "replica": self.replica, "items": len(graph)}
        self._lease = LeaseKeeper(cfg.registry, self.role, cfg.lease_ms, cfg.renew_ms, meta,
                                  on_lost=self._on_lost)
        try:
            self.epoch = self._lease.acquire()
        except LeaseHeldError:
            self._control.stop()
            raise
        for w in range(max(cfg.executor_workers, 1)):
            sub = Subscription(cfg.broker, self.shard, self.role, self.epoch)
            if w == 0 and not sub.join():
                self._lease.release()
                self._control.stop()
                raise LeaseHeldError(f"{self.role}: broker rejected epoch {self.epoch} as stale")
            self._subs.append(sub)
            t = threading.Thread(target=self._work, args=(sub,), daemon=True,
                                 name=f"{self.role}-w{w}")
            t.start()
            self._threads.append(t)
        logger.info("%s live (epoch %d, %d items)", self.role, self.epoch, len(graph))
        return self

    def _on_lost(self) -> None:
        self._stop.set()

    def _work(self, sub: Subscription) -> None:
        try:
            while not self._stop.is_set():
                try:
                    msgs = sub.fetch(max_n=1, wait_ms=250)
                except ConnectivityError as exc:
                    logger.warning("%s: broker unreachable: %s", self.role, exc)
                    time.sleep(0.2)
                    continue
                if msgs is None:
                    logger.warning("%s: dropped from the broker group; stopping", self.role)
                    self._stop.set()
                    break
                for raw in msgs:
                    self.handle(raw)
                    sub.ack()
        finally:
            self.stopped.set()

    def handle(self, raw: bytes) -> wire.PartialResult | None:
        """Serve one encoded request; returns the partial that was sent."""
        t0 = time.perf_counter()
        try:
            req = wire.decode_request(raw)
        except ProtocolError as exc:
            logger.warning("%s: bad request dropped: %s", self.role, exc)
            return None
        cfg = self.config
        l = max(1, min(req.search_l, cfg.max_search_l))
        res = self.graph.search(req.vector, k=req.k, l=l, max_evals=cfg.max_evals)
        part = wire.PartialResult(req.query_id, self.shard, res.ids, res.scores, self.epoch,
                                  res.evaluations)
        spent = time.perf_counter() - t0
        if self.slowdown > 1.0:
            time.sleep((self.slowdown - 1.0) * spent)
        self._replies.send(req.reply_to, wire.encode_partial(part))
        with self._stats_lock:
            self.processed += 1
            self.evaluations += res.evaluations
            self.busy_s += time.perf_counter() - t0
        return part

    def stats(self) -> dict:
        with self._stats_lock:
            return {"role": self.role, "epoch": self.epoch, "processed": self.processed,
                    "evaluations": self.evaluations, "busy_s": self.busy_s,
                    "slowdown": self.slowdown, "pid": os.getpid()}

    def wait(self, timeout: float | None = None) -> bool:
        return self.stopped.wait(timeout)

    def stop(self, release: bool = True) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2.0)
        for sub in self._subs:
            try:
                sub.leave() if release else sub.close()
            except ConnectivityError:
                pass
        if self._lease is not None:
            self._lease.release() if release else self._lease.abandon()
        if self._control is not None:
            self._control.stop()
        self._replies.close()
        self.stopped.set()

    def crash(self) -> None:
        """Simulate abrupt death: stop work and drop connections without releasing."""
        self.stop(release=False)
