"""Master: keeps every executor and coordinator slot filled.

Only the holder of the ``master`` lease acts; other master processes are
hot standbys polling for the lease. The active master watches registry
events and, once per monitoring period, compares the live leases with the
expected slots (``shards x replicas`` executors plus the configured
coordinators) and spawns a process for every empty slot. A freshly
spawned process gets a grace period to register before it is replaced.
"""
from __future__ import annotations

import logging
import os
import subprocess
import sys
import threading
import time
from pathlib import Path

from metashard.cluster.config import ClusterConfig
from metashard.cluster.executor import executor_role
from metashard.cluster.registry import LeaseKeeper, RegistryClient
from metashard.errors import ConnectivityError, LeaseHeldError
from metashard.partition.index import read_manifest

logger = logging.getLogger(__name__)


def replica_host(shard: int, replica: int, hosts: list[str], replicas: int = 2) -> str | None:
    """Host for a shard replica: replica ``r`` of shard ``i`` goes to
    ``(i + r * floor(H / R)) mod H``, which for two replicas is ``i mod H``
    and ``(i + floor(H/2)) mod H``."""
    if not hosts:
        return None
    H = len(hosts)
    step = H // max(replicas, 1)
    return hosts[(shard + replica * step) % H]


def slot_roles(w: int, replicas: int, coordinators: int) -> list[str]:
    roles = [executor_role(s, r) for s in range(w) for r in range(replicas)]
    roles += [f"coordinator/{c}" for c in range(coordinators)]
    return roles


class Master:
    def __init__(self, config: ClusterConfig, config_path: str, spawn=None) -> None:
        self.config = config
        self.config_path = str(config_path)
        man = read_manifest(Path(config.index_dir) / "manifest")
        self.w = int(man["w"])
        self.slots = slot_roles(self.w, config.replicas, config.coordinators)
        self._spawn_fn = spawn or self._spawn_process
        self._children: dict[str, tuple[object, float]] = {}
        self._registry = RegistryClient(config.registry)
        self._lease: LeaseKeeper | None = None
        self._stop = threading.Event()
        self.active = threading.Event()
        self.spawned: list[tuple[float, str]] = []
        self.alerts: list[str] = []
        self._since = 0

    # -- spawning ----------------------------------------------------------

    def command(self, role: str) -> list[str]:
        kind, *rest = role.split("/")
        cmd = [sys.executable, "-m", "metashard.cli", kind, "--config", self.config_path]
        if kind == "executor":
            shard, replica = int(rest[0]), int(rest[1])
            host = replica_host(shard, replica, self.config.host_list, self.config.replicas)
            cmd += ["--shard", str(shard), "--replica", str(replica), "--host", str(host)]
        else:
            cmd += ["--id", rest[0]]
        return cmd

    def _spawn_process(self, role: str):
        out = subprocess.DEVNULL
        if self.config.log_dir:
            os.makedirs(self.config.log_dir, exist_ok=True)
            out = open(Path(self.config.log_dir) / (role.replace("/", "_") + ".log"), "ab")
        # New session: children must outlive a crashed master.
        return subprocess.Popen(self.command(role), stdout=out, stderr=subprocess.STDOUT,
                                stdin=subprocess.DEVNULL, start_new_session=True)

    def _spawn(self, role: str) -> None:
        kind, *rest = role.split("/")
        if kind == "executor":
            host = replica_host(int(rest[0]), int(rest[1]), self.config.host_list,
                                self.config.replicas)
            if host is None:
                msg = f"no available host for {role}; will retry"
                logger.error(msg)
                self.alerts.append(msg)
                return
        logger.info("spawning %s", role)
        proc = self._spawn_fn(role)
        self._children[role] = (proc, time.monotonic())
        self.spawned.append((time.monotonic(), role))

    def _in_grace(self, role: str) -> bool:
        entry = self._children.get(role)
        if entry is None:
            return False
        proc, t = entry
        if proc is not None and hasattr(proc, "poll") and proc.poll() is not None:
            return False
        return time.monotonic() - t < self.config.spawn_grace_ms / 1000.0

    def reconcile(self) -> list[str]:
        """Spawn every slot that has neither a live lease nor a starting process."""
        live = {l["role"] for l in self._registry.list("")}
        started = []
        for role in self.slots:
            if role in live:
                continue
            if self._in_grace(role):
                continue
            self._spawn(role)
            started.append(role)
        return started

    # -- main loop -----------------------------------------------------------

    def run(self) -> None:
        """Stand by until the master lease is won, then monitor until stopped."""
        cfg = self.config
        while not self._stop.is_set():
            if not self.active.is_set():
                keeper = LeaseKeeper(cfg.registry, "master", cfg.lease_ms, cfg.renew_ms,
                                     {"pid": os.getpid()}, on_lost=self._demote)
                try:
                    keeper.acquire()
                except LeaseHeldError:
                    keeper.abandon()
                    self._stop.wait(min(cfg.renew_ms, cfg.lease_ms / 4) / 1000.0)
                    continue
                except ConnectivityError as exc:
                    logger.warning("registry unreachable: %s", exc)
                    self._stop.wait(cfg.renew_ms / 1000.0)
                    continue
                self._lease = keeper
                self.active.set()
                logger.info("master lease acquired (epoch %d)", keeper.epoch)
            self._monitor_once()

    def _monitor_once(self) -> None:
        period = self.config.monitor_ms
        try:
            self.reconcile()
            # Sleep one period, waking early for lease expiries.
            since = self._since
            deadline = time.monotonic() + period / 1000.0
            while not self._stop.is_set() and self.active.is_set():
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                events, self._since = self._registry.watch(since, int(left * 1000))
                since = self._since
                if any(e["type"] in ("expired", "released") and e["role"] in self.slots
                       for e in events):
                    break
        except ConnectivityError as exc:
            logger.warning("registry unreachable: %s", exc)
            self._stop.wait(period / 1000.0)

    def _demote(self) -> None:
        logger.warning("master lease lost; returning to standby")
        self.active.clear()

    def stop(self, kill_children: bool = False) -> None:
        self._stop.set()
        if self._lease is not None:
            self._lease.release()
        if kill_children:
            for proc, _ in self._children.values():
                if proc is not None and hasattr(proc, "terminate"):
                    proc.terminate()
        self._registry.close()
