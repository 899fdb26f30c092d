"""Client helper: find coordinators in the registry and send them queries.

Each query goes to a coordinator chosen uniformly at random. One
connection per coordinator is shared by all threads; replies are matched
to requests by query id, so many queries can be in flight at once.
"""
from __future__ import annotations

import itertools
import logging
import random
import socket
import threading

import numpy as np

from metashard import errors
from metashard.cluster import wire
from metashard.cluster.net import connect
from metashard.cluster.registry import RegistryClient
from metashard.errors import ConnectivityError, MetashardError, ProtocolError
from metashard.result import QueryResult

logger = logging.getLogger(__name__)


def _error_from(text: str) -> MetashardError:
    """Rebuild the coordinator's exception type from ``"Name: message"``."""
    name, _, msg = text.partition(": ")
    cls = getattr(errors, name, None)
    if not (isinstance(cls, type) and issubclass(cls, MetashardError)):
        return MetashardError(text)
    exc = cls.__new__(cls)
    Exception.__init__(exc, msg)
    if cls is errors.PartialTimeoutError:
        exc.query_id, exc.partials, exc.missing = 0, [], set()
    return exc


class _Link:
    """Connection to one coordinator with a reader thread."""

    def __init__(self, addr: str, on_dead) -> None:
        self.addr = addr
        self.sock = connect(addr)
        self._send_lock = threading.Lock()
        self._waiting: dict[int, object] = {}
        self._lock = threading.Lock()
        self._on_dead = on_dead
        self.alive = True
        threading.Thread(target=self._read, daemon=True).start()

    def submit(self, qid: int, data: bytes, callback) -> None:
        with self._lock:
            self._waiting[qid] = callback
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            with self._lock:
                self._waiting.pop(qid, None)
            self._die()
            raise ConnectivityError(f"coordinator {self.addr} unreachable: {exc}") from exc

    def _read(self) -> None:
        try:
            while True:
                payload = wire.read_frame(self.sock)
                if payload is None:
                    break
                res = wire.decode_client_result(payload)
                with self._lock:
                    cb = self._waiting.pop(res.query_id, None)
                if cb is not None:
                    cb(res)
        except (OSError, ProtocolError) as exc:
            logger.debug("coordinator link %s closed: %s", self.addr, exc)
        finally:
            self._die()

    def _die(self) -> None:
        if not self.alive:
            return
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass
        with self._lock:
            waiting, self._waiting = self._waiting, {}
        for cb in waiting.values():
            cb(ConnectivityError(f"coordinator {self.addr} went away"))
        self._on_dead(self)


class ClusterClient:
    """Query a running cluster. Mirrors ``ShardedIndex.search`` so the bench
    harness can drive either."""

    def __init__(self, registry_addr: str, timeout: float = 5.0, seed: int | None = None) -> None:
        self._registry = RegistryClient(registry_addr)
        self.timeout = timeout
        self._rng = random.Random(seed)
        self._links: dict[str, _Link] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self.w = 0
        self.dim = 0
        self.refresh()

    def refresh(self) -> list[str]:
        leases = self._registry.list("coordinator/")
        addrs = [l["meta"]["addr"] for l in leases if "addr" in l.get("meta", {})]
        if leases:
            self.w = int(leases[0]["meta"].get("w", 0))
            self.dim = int(leases[0]["meta"].get("dim", 0) or 0)
        self._addrs = addrs
        return addrs

    def _link(self) -> _Link:
        if not self._addrs:
            self.refresh()
        if not self._addrs:
            raise ConnectivityError("no live coordinator is registered")
        addr = self._rng.choice(self._addrs)
        with self._lock:
            link = self._links.get(addr)
            if link is None or not link.alive:
                try:
                    link = self._links[addr] = _Link(addr, self._forget)
                except ConnectivityError:
                    self._addrs = [a for a in self._addrs if a != addr]
                    raise
        return link

    def _forget(self, link: _Link) -> None:
        with self._lock:
            if self._links.get(link.addr) is link:
                del self._links[link.addr]

    def search_async(self, q, callback, K: int = 1, k: int = 10, l: int = 100,
                     meta_l: int | None = None) -> None:
        """Send a query; ``callback`` receives a QueryResult or an exception."""
        qid = next(self._ids)
        cq = wire.ClientQuery(qid, np.asarray(q, dtype=np.float32), K, k, l,
                              -1 if meta_l is None else meta_l)

        def done(res):
            if isinstance(res, BaseException):
                callback(res)
            elif not res.ok:
                callback(_error_from(res.error))
            else:
                callback(QueryResult(res.ids, res.scores, res.evaluations, res.shards))

        self._link().submit(qid, wire.encode_client_query(cq), done)

    def search(self, q, K: int = 1, k: int = 10, l: int = 100,
               meta_l: int | None = None) -> QueryResult:
        box: list = []
        ev = threading.Event()

        def done(r):
            box.append(r)
            ev.set()

        self.search_async(q, done, K, k, l, meta_l)
        if not ev.wait(self.timeout):
            raise ConnectivityError(f"no reply within {self.timeout}s")
        out = box[0]
        if isinstance(out, BaseException):
            raise out
        return out

    def close(self) -> None:
        with self._lock:
            links = list(self._links.values())
        for link in links:
            try:
                link.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._registry.close()
