"""Line-oriented ``key=value`` cluster configuration.

Blank lines and lines starting with ``#`` are ignored. Unknown keys are
kept (so tools can add their own) but the known ones below are typed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class ClusterConfig:
    broker: str = "127.0.0.1:7100"
    registry: str = "127.0.0.1:7101"
    index_dir: str = "index"
    bind_host: str = "127.0.0.1"
    replicas: int = 1
    coordinators: int = 1
    hosts: str = "local"
    lease_ms: int = 2000
    renew_ms: int = 500
    rebalance_ms: int = 500
    monitor_ms: int = 1000
    registry_check_ms: int = 100
    session_ms: int = 2000
    message_ttl_ms: int = 5000
    gather_timeout_ms: int = 100
    spawn_grace_ms: int = 8000
    K: int = 1
    k: int = 10
    search_l: int = 100
    max_search_l: int = 1000
    max_evals: int = 0
    executor_workers: int = 1
    benchmark_mode: bool = False
    log_dir: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def host_list(self) -> list[str]:
        return [h for h in (s.strip() for s in self.hosts.split(",")) if h]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        lines += [f"{k}={v}" for k, v in self.extra.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        p = Path(path)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(self.to_text())
        os.replace(tmp, p)
        return p

    def resolve(self, base) -> "ClusterConfig":
        """Make ``index_dir`` and ``log_dir`` absolute relative to ``base``."""
        base = Path(base)
        if self.index_dir and not os.path.isabs(self.index_dir):
            self.index_dir = str((base / self.index_dir).resolve())
        if self.log_dir and not os.path.isabs(self.log_dir):
            self.log_dir = str((base / self.log_dir).resolve())
        return self


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config(text: str) -> ClusterConfig:
    """Parse config text.

    Raises:
        ValueError: a line without ``=`` or a value of the wrong type.
    """
    cfg = ClusterConfig()
    types = {f.name: f.type for f in fields(ClusterConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = key.strip(), value.strip()
        kind = types.get(key)
        if kind is None or key == "extra":
            cfg.extra[key] = value
        elif kind == "bool":
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"line {lineno}: {key} expects a boolean, got {value!r}")
            setattr(cfg, key, low in _TRUE)
        elif kind == "int":
            try:
                setattr(cfg, key, int(value))
            except ValueError:
                raise ValueError(f"line {lineno}: {key} expects an integer, got {value!r}") from None
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path) -> ClusterConfig:
    p = Path(path)
    return parse_config(p.read_text()).resolve(p.parent)
