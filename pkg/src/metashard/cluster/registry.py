"""Lease registry: exclusive, expiring, epoch-numbered claims on roles.

Roles are strings such as ``executor/3/1`` (shard 3, replica 1),
``coordinator/0`` or ``master``. Each role keeps an epoch counter that
advances whenever ownership changes hands, so a message stamped with an
older epoch can be recognized as coming from a superseded instance.
The registry's own monotonic clock is the only time authority.
"""
from __future__ import annotations

import itertools
import logging
import os
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field

from metashard.cluster.net import Connection, FrameServer, RpcClient, reply
from metashard.cluster import wire
from metashard.errors import ConnectivityError, LeaseHeldError, NotFoundError

logger = logging.getLogger(__name__)


@dataclass
class Lease:
    role: str
    holder: str
    epoch: int
    expiry: float
    meta: dict = field(default_factory=dict)

    def live(self, now: float) -> bool:
        return self.expiry > now


class Registry:
    """Lease table plus an event log of expiries and releases."""

    def __init__(self, check_ms: int = 100, max_events: int = 10000) -> None:
        self.check_s = check_ms / 1000.0
        self._leases: dict[str, Lease] = {}
        self._epochs: dict[str, int] = {}
        self._events: list[dict] = []
        self._seq = itertools.count(1)
        self._max_events = max_events
        self._cv = threading.Condition()
        self._stop = threading.Event()

    def start(self) -> "Registry":
        threading.Thread(target=self._monitor, daemon=True).start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._cv:
            self._cv.notify_all()

    def _monitor(self) -> None:
        while not self._stop.wait(self.check_s):
            self.expire()

    def _emit(self, kind: str, lease: Lease) -> None:
        self._events.append({"seq": next(self._seq), "type": kind, "role": lease.role,
                             "epoch": lease.epoch, "holder": lease.holder, "meta": lease.meta})
        del self._events[: max(0, len(self._events) - self._max_events)]
        self._cv.notify_all()

    def expire(self) -> None:
        now = time.monotonic()
        with self._cv:
            for role in [r for r, l in self._leases.items() if not l.live(now)]:
                lease = self._leases.pop(role)
                logger.info("lease %s (epoch %d) expired", role, lease.epoch)
                self._emit("expired", lease)

    def acquire(self, role: str, holder: str, ttl_ms: int, meta: dict | None = None) -> Lease:
        """Claim ``role``.

        Raises:
            LeaseHeldError: another holder has an unexpired lease on it.
        """
        now = time.monotonic()
        with self._cv:
            cur = self._leases.get(role)
            if cur is not None and cur.live(now):
                if cur.holder != holder:
                    raise LeaseHeldError(f"{role} is held by {cur.holder} (epoch {cur.epoch})")
                cur.expiry = now + ttl_ms / 1000.0
                return cur
            if cur is not None:
                self._emit("expired", self._leases.pop(role))
            epoch = self._epochs.get(role, 0) + 1
            self._epochs[role] = epoch
            lease = Lease(role, holder, epoch, now + ttl_ms / 1000.0, dict(meta or {}))
            self._leases[role] = lease
            self._emit("acquired", lease)
            return lease

    def renew(self, role: str, holder: str, epoch: int, ttl_ms: int) -> Lease:
        """Extend a live lease.

        Raises:
            NotFoundError: the lease expired or belongs to someone else.
        """
        now = time.monotonic()
        with self._cv:
            cur = self._leases.get(role)
            if cur is None or cur.holder != holder or cur.epoch != epoch or not cur.live(now):
                raise NotFoundError(f"{role} epoch {epoch} is not held by {holder}")
            cur.expiry = now + ttl_ms / 1000.0
            return cur

    def release(self, role: str, holder: str, epoch: int) -> bool:
        with self._cv:
            cur = self._leases.get(role)
            if cur is None or cur.holder != holder or cur.epoch != epoch:
                return False
            del self._leases[role]
            self._emit("released", cur)
            return True

    def list(self, prefix: str = "") -> list[dict]:
        now = time.monotonic()
        with self._cv:
            return [
                {"role": l.role, "holder": l.holder, "epoch": l.epoch,
                 "ttl_ms": int((l.expiry - now) * 1000), "meta": l.meta}
                for r, l in sorted(self._leases.items())
                if r.startswith(prefix) and l.live(now)
            ]

    def watch(self, since: int, wait_s: float) -> tuple[list[dict], int]:
        """Events with ``seq > since``; blocks up to ``wait_s`` for the first one."""
        deadline = time.monotonic() + wait_s
        with self._cv:
            while True:
                evs = [e for e in self._events if e["seq"] > since]
                last = self._events[-1]["seq"] if self._events else 0
                if evs:
                    return evs, last
                left = deadline - time.monotonic()
                if left <= 0 or self._stop.is_set():
                    return [], max(last, since)
                self._cv.wait(left)


class RegistryServer(FrameServer):
    def __init__(self, registry: Registry, host: str = "127.0.0.1", port: int = 0) -> None:
        super().__init__(host, port)
        self.registry = registry

    def start(self) -> "RegistryServer":
        self.registry.start()
        super().start()
        return self

    def stop(self) -> None:
        self.registry.stop()
        super().stop()

    def dispatch(self, payload: bytes, conn: Connection) -> None:
        msg, _ = wire.decode_control(payload)
        op = msg.get("op")
        r = self.registry
        try:
            if op == "acquire":
                l = r.acquire(msg["role"], msg["holder"], int(msg["ttl_ms"]), msg.get("meta"))
                reply(conn, {"ok": True, "epoch": l.epoch})
            elif op == "renew":
                r.renew(msg["role"], msg["holder"], int(msg["epoch"]), int(msg["ttl_ms"]))
                reply(conn, {"ok": True})
            elif op == "release":
                reply(conn, {"ok": r.release(msg["role"], msg["holder"], int(msg["epoch"]))})
            elif op == "list":
                reply(conn, {"ok": True, "leases": r.list(msg.get("prefix", ""))})
            elif op == "watch":
                evs, last = r.watch(int(msg.get("since", 0)), float(msg.get("wait_ms", 0)) / 1000)
                reply(conn, {"ok": True, "events": evs, "last": last})
            elif op == "ping":
                reply(conn, {"ok": True})
            else:
                reply(conn, {"ok": False, "error": "unknown", "message": f"unknown op {op!r}"})
        except LeaseHeldError as exc:
            reply(conn, {"ok": False, "error": "held", "message": str(exc)})
        except NotFoundError as exc:
            reply(conn, {"ok": False, "error": "lost", "message": str(exc)})


def make_holder_id(tag: str = "") -> str:
    return f"{socket.gethostname()}:{os.getpid()}:{tag}{uuid.uuid4().hex[:8]}"


class RegistryClient:
    def __init__(self, addr: str) -> None:
        self.addr = addr
        self._rpc = RpcClient(addr)

    def _call(self, msg: dict, timeout: float | None = None) -> dict:
        resp, _ = self._rpc.call(msg, timeout=timeout)
        if not resp.get("ok"):
            err = resp.get("error")
            if err == "held":
                raise LeaseHeldError(resp.get("message", ""))
            if err == "lost":
                raise NotFoundError(resp.get("message", ""))
        return resp

    def acquire(self, role: str, holder: str, ttl_ms: int, meta: dict | None = None) -> int:
        return int(self._call({"op": "acquire", "role": role, "holder": holder,
                               "ttl_ms": ttl_ms, "meta": meta or {}})["epoch"])

    def renew(self, role: str, holder: str, epoch: int, ttl_ms: int) -> None:
        self._call({"op": "renew", "role": role, "holder": holder, "epoch": epoch, "ttl_ms": ttl_ms})

    def release(self, role: str, holder: str, epoch: int) -> bool:
        return bool(self._call({"op": "release", "role": role, "holder": holder, "epoch": epoch})["ok"])

    def list(self, prefix: str = "") -> list[dict]:
        return self._call({"op": "list", "prefix": prefix})["leases"]

    def watch(self, since: int = 0, wait_ms: int = 1000) -> tuple[list[dict], int]:
        resp = self._call({"op": "watch", "since": since, "wait_ms": wait_ms},
                          timeout=wait_ms / 1000.0 + 5.0)
        return resp["events"], int(resp["last"])

    def close(self) -> None:
        self._rpc.close()


class LeaseKeeper:
    """Holds one lease and renews it in the background.

    ``on_lost`` runs (once, from the renewal thread) if the lease cannot be
    renewed before it would have expired.
    """

    def __init__(self, registry_addr: str, role: str, ttl_ms: int = 2000, renew_ms: int = 500,
                 meta: dict | None = None, holder: str | None = None, on_lost=None) -> None:
        self.role = role
        self.ttl_ms = ttl_ms
        self.renew_ms = renew_ms
        self.meta = meta or {}
        self.holder = holder or make_holder_id()
        self.on_lost = on_lost
        self.epoch = 0
        self._client = RegistryClient(registry_addr)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.lost = threading.Event()

    def acquire(self) -> int:
        """Take the lease (raises LeaseHeldError) and start renewing."""
        self.epoch = self._client.acquire(self.role, self.holder, self.ttl_ms, self.meta)
        self._thread = threading.Thread(target=self._renew_loop, daemon=True)
        self._thread.start()
        return self.epoch

    def _renew_loop(self) -> None:
        last_ok = time.monotonic()
        while not self._stop.wait(self.renew_ms / 1000.0):
            try:
                self._client.renew(self.role, self.holder, self.epoch, self.ttl_ms)
                last_ok = time.monotonic()
            except NotFoundError:
                self._lose("lease taken over or expired")
                return
            except ConnectivityError as exc:
                if time.monotonic() - last_ok > self.ttl_ms / 1000.0:
                    self._lose(f"registry unreachable: {exc}")
                    return

    def _lose(self, why: str) -> None:
        logger.warning("lost lease %s epoch %d: %s", self.role, self.epoch, why)
        self.lost.set()
        if self.on_lost is not None:
            self.on_lost()

    def release(self) -> None:
        self._stop.set()
        if self.epoch and not self.lost.is_set():
            try:
                self._client.release(self.role, self.holder, self.epoch)
            except ConnectivityError:
                pass
        self._client.close()

    def abandon(self) -> None:
        """Stop renewing without releasing, as a crashed holder would."""
        self._stop.set()
        self._client.close()
