"""Compare the compiled and pure-Python graph kernels.

Times index construction and search on the same data with each backend
and checks that both produce byte-identical graphs.

    python benchmarks/bench_kernels.py --n 5000 --dim 32
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from metashard.hnsw import HnswGraph, load_kernel


def time_backend(name, items, queries, args):
    kernel = load_kernel(name)
    t0 = time.perf_counter()
    g = HnswGraph.build(items, M=args.M, M0=2 * args.M, build_l=args.build_l, seed=1,
                        kernel=kernel)
    build_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    evals = 0
    for q in queries:
        evals += g.search(q, k=10, l=args.l).evaluations
    search_s = time.perf_counter() - t0
    return g, build_s, search_s, evals / len(queries)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--build-l", type=int, default=100)
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    items = rng.random((args.n, args.dim), dtype=np.float32)
    queries = rng.random((args.queries, args.dim), dtype=np.float32)

    rows = {}
    for name in ("cython", "python"):
        try:
            rows[name] = time_backend(name, items, queries, args)
        except ImportError as exc:
            print(f"{name}: unavailable ({exc})")
    print(f"{'backend':8} {'build_s':>9} {'search_ms/q':>12} {'evals/q':>9}")
    for name, (_, build_s, search_s, evals) in rows.items():
        print(f"{name:8} {build_s:9.2f} {1e3 * search_s / args.queries:12.3f} {evals:9.1f}")
    if len(rows) == 2:
        (gc, bc, sc, _), (gp, bp, sp, _) = rows["cython"], rows["python"]
        same = gc.to_bytes() == gp.to_bytes()
        print(f"speedup build={bp / bc:.1f}x search={sp / sc:.1f}x identical_graphs={same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
