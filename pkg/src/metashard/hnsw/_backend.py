"""Selects the compiled kernel when available, else the pure-Python one.

Set ``METASHARD_BACKEND=python`` to force the fallback (used by the test
suite to exercise both paths and by ``benchmarks/bench_kernels.py``).
"""
from __future__ import annotations

import importlib
import logging
import os

logger = logging.getLogger(__name__)


def load_kernel(name: str | None = None):
    """Return the kernel module named ``name`` ("cython" or "python")."""
    name = (name or os.environ.get("METASHARD_BACKEND", "")).strip().lower()
    if name == "python":
        return importlib.import_module("metashard.hnsw._pykernel")
    try:
        return importlib.import_module("metashard.hnsw._kernel")
    except ImportError:
        if name == "cython":
            raise
        logger.debug("compiled kernel unavailable, using pure-Python fallback")
        return importlib.import_module("metashard.hnsw._pykernel")


kernel = load_kernel()
BACKEND: str = kernel.BACKEND
