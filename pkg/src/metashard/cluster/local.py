"""Run a whole cluster as local processes (tests, benchmarks, demos).

Layout: one ``services`` process hosting the broker and the registry, one
or more ``master`` processes (the first to win the lease is active, the
rest stand by), and the executors and coordinators the active master
spawns. Every process reads the same config file.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

from metashard.cluster.client import ClusterClient
from metashard.cluster.config import ClusterConfig
from metashard.cluster.master import slot_roles
from metashard.cluster.net import RpcClient
from metashard.cluster.registry import RegistryClient
from metashard.errors import ConnectivityError, NotFoundError
from metashard.partition.index import read_manifest

logger = logging.getLogger(__name__)


def _cli(*args: str) -> list[str]:
    return [sys.executable, "-m", "metashard.cli", *args]


class LocalCluster:
    def __init__(self, index_dir, workdir, replicas: int = 1, coordinators: int = 1,
                 masters: int = 1, **overrides) -> None:
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.index_dir = str(Path(index_dir).resolve())
        self.w = int(read_manifest(Path(self.index_dir) / "manifest")["w"])
        self.config = ClusterConfig(index_dir=self.index_dir, replicas=replicas,
                                    coordinators=coordinators,
                                    log_dir=str(self.workdir / "logs"))
        for key, value in overrides.items():
            if not hasattr(self.config, key):
                raise TypeError(f"unknown config key {key}")
            setattr(self.config, key, value)
        self.n_masters = masters
        self.config_path = self.workdir / "cluster.conf"
        self._services: subprocess.Popen | None = None
        self._masters: list[subprocess.Popen] = []
        self._registry: RegistryClient | None = None
        self._seen_pids: set[int] = set()

    # -- startup -------------------------------------------------------------

    def start(self, timeout: float = 60.0) -> "LocalCluster":
        addr_file = self.workdir / "services.addr"
        if addr_file.exists():
            addr_file.unlink()
        self.config.save(self.config_path)  # services only need timing keys
        log = open(self.workdir / "services.log", "ab")
        self._services = subprocess.Popen(
            _cli("services", "--config", str(self.config_path), "--broker-port", "0",
                 "--registry-port", "0", "--address-file", str(addr_file)),
            stdout=log, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + timeout
        while not addr_file.exists():
            if self._services.poll() is not None:
                raise RuntimeError("services process exited during startup")
            if time.monotonic() > deadline:
                raise TimeoutError("services did not start")
            time.sleep(0.05)
        addrs = json.loads(addr_file.read_text())
        self.config.broker = addrs["broker"]
        self.config.registry = addrs["registry"]
        self.config.save(self.config_path)
        self._registry = RegistryClient(self.config.registry)
        for _ in range(self.n_masters):
            self.start_master()
        self.wait_ready(timeout=max(deadline - time.monotonic(), 1.0))
        return self

    def start_master(self) -> subprocess.Popen:
        log = open(self.workdir / f"master_{len(self._masters)}.log", "ab")
        proc = subprocess.Popen(_cli("master", "--config", str(self.config_path)),
                                stdout=log, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL)
        self._masters.append(proc)
        self._seen_pids.add(proc.pid)
        return proc

    @property
    def slots(self) -> list[str]:
        return slot_roles(self.w, self.config.replicas, self.config.coordinators)

    def leases(self, prefix: str = "") -> dict[str, dict]:
        out = {l["role"]: l for l in self._registry.list(prefix)}
        for l in out.values():
            pid = l.get("meta", {}).get("pid")
            if pid:
                self._seen_pids.add(int(pid))
        return out

    def wait_ready(self, timeout: float = 60.0, roles=None) -> dict[str, dict]:
        roles = set(self.slots if roles is None else roles) | {"master"}
        deadline = time.monotonic() + timeout
        while True:
            live = self.leases()
            if roles <= set(live):
                return live
            if time.monotonic() > deadline:
                raise TimeoutError(f"roles not live: {sorted(roles - set(live))}")
            time.sleep(0.05)

    def client(self, timeout: float = 10.0, seed: int | None = 0) -> ClusterClient:
        return ClusterClient(self.config.registry, timeout=timeout, seed=seed)

    # -- fault injection -----------------------------------------------------

    def pid_of(self, role: str) -> int:
        lease = self.leases().get(role)
        if lease is None or "pid" not in lease.get("meta", {}):
            raise NotFoundError(f"no live instance holds {role}")
        return int(lease["meta"]["pid"])

    def kill(self, role: str) -> int:
        pid = self.pid_of(role)
        os.kill(pid, signal.SIGKILL)
        return pid

    def slowdown(self, role: str, factor: float) -> dict:
        lease = self.leases().get(role)
        if lease is None:
            raise NotFoundError(f"no live instance holds {role}")
        rpc = RpcClient(lease["meta"]["control"])
        try:
            resp, _ = rpc.call({"op": "slowdown", "factor": factor})
        finally:
            rpc.close()
        if not resp.get("ok"):
            raise RuntimeError(resp.get("error", "slowdown rejected"))
        return resp

    def executor_stats(self, role: str) -> dict:
        lease = self.leases().get(role)
        if lease is None:
            raise NotFoundError(f"no live instance holds {role}")
        rpc = RpcClient(lease["meta"]["control"])
        try:
            return rpc.call({"op": "stats"})[0]
        finally:
            rpc.close()

    def broker_stats(self) -> dict:
        rpc = RpcClient(self.config.broker)
        try:
            return rpc.call({"op": "stats"})[0]["topics"]
        finally:
            rpc.close()

    # -- teardown ------------------------------------------------------------

    def stop(self) -> None:
        for p in self._masters:
            if p.poll() is None:
                p.kill()
        for p in self._masters:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        try:
            if self._registry is not None:
                self.leases()
        except ConnectivityError:
            pass
        for pid in self._seen_pids:
            try:
                os.kill(pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        if self._services is not None and self._services.poll() is None:
            # Orphans that never registered lose the registry and exit on their own.
            self._services.kill()
            self._services.wait(timeout=5)
        if self._registry is not None:
            self._registry.close()

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
