"""Single-machine hierarchical proximity graph."""
from metashard.hnsw._backend import BACKEND, load_kernel
from metashard.hnsw.graph import (
    DEFAULT_BUILD_L,
    DEFAULT_M,
    DEFAULT_M0,
    HnswGraph,
    draw_level,
)

__all__ = [
    "BACKEND",
    "DEFAULT_BUILD_L",
    "DEFAULT_M",
    "DEFAULT_M0",
    "HnswGraph",
    "draw_level",
    "load_kernel",
]
