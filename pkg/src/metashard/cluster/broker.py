"""In-repo message broker with consumer groups.

Each topic (one per shard) keeps a sub-queue per group member. A publish
goes to the member with the lowest weighted load
``(queued + in_flight + 1) / weight``. Every rebalance period each
member's weight is refreshed to ``1 / (1 + EWMA(backlog))`` and all
queued messages are redistributed under the same rule, so a member that
falls behind is handed less work.

Delivery is at most once: a message handed to a member by ``fetch`` is
its responsibility. Messages still queued for a member that leaves,
disconnects or stops polling are moved to the remaining members. With
no members at all, messages wait up to the TTL for one to join.
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from metashard.cluster import wire
from metashard.cluster.net import Connection, FrameServer, RpcClient, reply

logger = logging.getLogger(__name__)


@dataclass
class Member:
    member_id: str
    epoch: int
    queue: deque = field(default_factory=deque)
    in_flight: int = 0
    ewma_backlog: float = 0.0
    weight: float = 1.0
    delivered: int = 0
    last_seen: float = field(default_factory=time.monotonic)
    conn: object = None

    def load(self) -> float:
        return (len(self.queue) + self.in_flight + 1) / self.weight


@dataclass
class TopicQueue:
    topic: int
    members: dict = field(default_factory=dict)
    unassigned: deque = field(default_factory=deque)  # (seq, enqueued_at, payload)
    expired: int = 0
    published: int = 0


class Broker:
    """Broker state machine; thread-safe, transport-agnostic."""

    def __init__(self, rebalance_ms: int = 500, ttl_ms: int = 5000, session_ms: int = 2000,
                 alpha: float = 0.5) -> None:
        self.rebalance_s = rebalance_ms / 1000.0
        self.ttl_s = ttl_ms / 1000.0
        self.session_s = session_ms / 1000.0
        self.alpha = alpha
        self._topics: dict[int, TopicQueue] = {}
        self._epochs: dict[str, int] = {}
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.rebalances = 0

    # -- lifecycle -------------------------------------------------------

    def start(self) -> "Broker":
        self._thread = threading.Thread(target=self._tick_loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._cv:
            self._cv.notify_all()

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.rebalance_s):
            self.tick()

    # -- membership ------------------------------------------------------

    def _topic(self, topic: int) -> TopicQueue:
        tq = self._topics.get(topic)
        if tq is None:
            tq = self._topics[topic] = TopicQueue(topic)
        return tq

    def join(self, topic: int, member_id: str, epoch: int, conn=None) -> bool:
        """Add ``member_id`` to the topic's group; False if ``epoch`` is stale."""
        with self._cv:
            if epoch < self._epochs.get(member_id, 0):
                return False
            self._epochs[member_id] = epoch
            tq = self._topic(topic)
            old = tq.members.pop(member_id, None)
            tq.members[member_id] = Member(member_id, epoch, conn=conn)
            if old is not None:
                self._requeue(tq, old.queue)
            self._drain_unassigned(tq)
            self._cv.notify_all()
            return True

    def leave(self, topic: int, member_id: str, epoch: int | None = None) -> None:
        with self._cv:
            tq = self._topics.get(topic)
            if tq is None:
                return
            m = tq.members.get(member_id)
            if m is None or (epoch is not None and m.epoch != epoch):
                return
            self._remove(tq, m)

    def _remove(self, tq: TopicQueue, m: Member) -> None:
        tq.members.pop(m.member_id, None)
        self._requeue(tq, m.queue)
        self._cv.notify_all()
        logger.info("topic %d: member %s left (%d queued moved)", tq.topic, m.member_id, len(m.queue))

    def drop_connection(self, conn) -> None:
        """Forget every member that joined over ``conn``."""
        with self._cv:
            for tq in self._topics.values():
                for m in [m for m in tq.members.values() if m.conn is conn]:
                    self._remove(tq, m)

    # -- placement -------------------------------------------------------

    def _pick(self, tq: TopicQueue) -> Member:
        # Lowest weighted load; member order breaks ties.
        return min(tq.members.values(), key=Member.load)

    def _requeue(self, tq: TopicQueue, items) -> None:
        items = sorted(items)
        if not tq.members:
            tq.unassigned.extend(items)
            return
        for item in items:
            self._pick(tq).queue.append(item)

    def _drain_unassigned(self, tq: TopicQueue) -> None:
        if tq.members and tq.unassigned:
            items = list(tq.unassigned)
            tq.unassigned.clear()
            self._requeue(tq, items)

    # -- data path -------------------------------------------------------

    def publish(self, topic: int, payload: bytes) -> bool:
        """Enqueue once. Returns False when buffered for lack of members."""
        with self._cv:
            tq = self._topic(topic)
            tq.published += 1
            item = (next(self._seq), time.monotonic(), payload)
            if not tq.members:
                tq.unassigned.append(item)
                return False
            self._pick(tq).queue.append(item)
            self._cv.notify_all()
            return True

    def fetch(self, topic: int, member_id: str, epoch: int, max_n: int = 1,
              wait_s: float = 0.25, done: int = 0) -> list[bytes] | None:
        """Up to ``max_n`` messages for a member; None if it is not (or no longer) a member.

        ``done`` reports how many previously fetched messages finished.
        """
        deadline = time.monotonic() + wait_s
        with self._cv:
            while True:
                tq = self._topics.get(topic)
                m = tq.members.get(member_id) if tq else None
                if m is None or m.epoch != epoch:
                    return None
                if done:
                    m.in_flight = max(0, m.in_flight - done)
                    done = 0
                m.last_seen = time.monotonic()
                if m.queue:
                    out = []
                    while m.queue and len(out) < max_n:
                        out.append(m.queue.popleft()[2])
                    m.in_flight += len(out)
                    m.delivered += len(out)
                    return out
                left = deadline - time.monotonic()
                if left <= 0 or self._stop.is_set():
                    return []
                self._cv.wait(left)

    # -- periodic maintenance ----------------------------------------------

    def tick(self) -> None:
        """Expire silent members and stale buffered messages, then rebalance."""
        now = time.monotonic()
        with self._cv:
            for tq in self._topics.values():
                for m in [m for m in tq.members.values() if now - m.last_seen > self.session_s]:
                    logger.warning("topic %d: member %s timed out", tq.topic, m.member_id)
                    self._remove(tq, m)
                while tq.unassigned and now - tq.unassigned[0][1] > self.ttl_s:
                    tq.unassigned.popleft()
                    tq.expired += 1
                self._rebalance(tq)
            self.rebalances += 1

    def _rebalance(self, tq: TopicQueue) -> None:
        if not tq.members:
            return
        pending = []
        for m in tq.members.values():
            backlog = len(m.queue) + m.in_flight
            m.ewma_backlog = self.alpha * backlog + (1 - self.alpha) * m.ewma_backlog
            m.weight = 1.0 / (1.0 + m.ewma_backlog)
            pending.extend(m.queue)
            m.queue.clear()
        self._requeue(tq, pending)
        self._drain_unassigned(tq)
        self._cv.notify_all()

    def rebalance(self, topic: int) -> None:
        with self._cv:
            tq = self._topics.get(topic)
            if tq is not None:
                self._rebalance(tq)

    def stats(self) -> dict:
        with self._cv:
            return {
                str(t): {
                    "published": tq.published,
                    "unassigned": len(tq.unassigned),
                    "expired": tq.expired,
                    "members": {
                        m.member_id: {
                            "epoch": m.epoch, "queued": len(m.queue), "in_flight": m.in_flight,
                            "delivered": m.delivered, "weight": round(m.weight, 4),
                        }
                        for m in tq.members.values()
                    },
                }
                for t, tq in self._topics.items()
            }


class BrokerServer(FrameServer):
    """TCP front end for :class:`Broker`."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0) -> None:
        super().__init__(host, port)
        self.broker = broker

    def start(self) -> "BrokerServer":
        self.broker.start()
        super().start()
        return self

    def stop(self) -> None:
        self.broker.stop()
        super().stop()

    def dispatch(self, payload: bytes, conn: Connection) -> None:
        msg, blobs = wire.decode_control(payload)
        op = msg.get("op")
        b = self.broker
        if op == "publish":
            topics = msg["topics"]
            queued = [b.publish(int(t), blob) for t, blob in zip(topics, blobs)]
            reply(conn, {"ok": True, "delivered": queued})
        elif op == "fetch":
            got = b.fetch(int(msg["topic"]), msg["member"], int(msg["epoch"]),
                          int(msg.get("max", 1)), float(msg.get("wait_ms", 250)) / 1000.0,
                          int(msg.get("done", 0)))
            if got is None:
                reply(conn, {"ok": False, "error": "not_member"})
            else:
                reply(conn, {"ok": True}, got)
        elif op == "join":
            ok = b.join(int(msg["topic"]), msg["member"], int(msg["epoch"]), conn)
            reply(conn, {"ok": ok, "error": "" if ok else "stale_epoch"})
        elif op == "leave":
            b.leave(int(msg["topic"]), msg["member"], msg.get("epoch"))
            reply(conn, {"ok": True})
        elif op == "stats":
            reply(conn, {"ok": True, "topics": b.stats()})
        elif op == "ping":
            reply(conn, {"ok": True})
        else:
            reply(conn, {"ok": False, "error": f"unknown op {op!r}"})

    def on_disconnect(self, conn: Connection) -> None:
        self.broker.drop_connection(conn)


class BrokerClient:
    """Publisher side. Consumers use :class:`Subscription`."""

    def __init__(self, addr: str) -> None:
        self.addr = addr
        self._rpc = RpcClient(addr)

    def publish(self, topic: int, payload: bytes) -> bool:
        return self.publish_many([topic], [payload])[0]

    def publish_many(self, topics, payloads) -> list[bool]:
        resp, _ = self._rpc.call({"op": "publish", "topics": [int(t) for t in topics]},
                                 payloads, retry=False)
        return resp["delivered"]

    def stats(self) -> dict:
        return self._rpc.call({"op": "stats"})[0]["topics"]

    def close(self) -> None:
        self._rpc.close()


class Subscription:
    """One consumer's connection: joining over it ties membership to the socket."""

    def __init__(self, addr: str, topic: int, member_id: str, epoch: int) -> None:
        self.topic = topic
        self.member_id = member_id
        self.epoch = epoch
        self._rpc = RpcClient(addr)
        self._done = 0

    def join(self) -> bool:
        resp, _ = self._rpc.call({"op": "join", "topic": self.topic, "member": self.member_id,
                                  "epoch": self.epoch})
        return bool(resp["ok"])

    def fetch(self, max_n: int = 1, wait_ms: int = 250) -> list[bytes] | None:
        """Next messages (possibly none); None once this member was dropped."""
        done, self._done = self._done, 0
        resp, blobs = self._rpc.call(
            {"op": "fetch", "topic": self.topic, "member": self.member_id, "epoch": self.epoch,
             "max": max_n, "wait_ms": wait_ms, "done": done},
            timeout=wait_ms / 1000.0 + 5.0, retry=False,
        )
        if not resp["ok"]:
            return None
        return blobs

    def ack(self, n: int = 1) -> None:
        self._done += n

    def leave(self) -> None:
        try:
            self._rpc.call({"op": "leave", "topic": self.topic, "member": self.member_id,
                            "epoch": self.epoch})
        finally:
            self._rpc.close()

    def close(self) -> None:
        self._rpc.close()
