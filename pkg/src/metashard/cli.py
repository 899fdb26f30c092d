"""Command-line interface: data preparation, index builds, benchmarks and
the cluster process entry points."""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

logger = logging.getLogger("metashard")


# -- helpers -------------------------------------------------------------------

def load_dataset(path) -> np.ndarray:
    """Load ``.npy`` or any of the vector file formats."""
    from metashard.bench.io import read_vectors

    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    return read_vectors(p)


def save_dataset(path, data) -> None:
    from metashard.bench.io import write_vectors

    p = Path(path)
    if p.suffix == ".npy":
        np.save(p, np.asarray(data, dtype=np.float32))
    else:
        write_vectors(p, data)


def _write(path, text: str) -> None:
    if path:
        Path(path).write_text(text)
    sys.stdout.write(text)


def _install_signal_handlers(stop) -> None:
    def handler(signum, frame):
        stop()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)


# -- data commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    from metashard.bench.io import read_vectors

    data = read_vectors(args.input, args.format)
    if args.limit:
        data = data[: args.limit]
    save_dataset(args.output, data)
    print(f"items={len(data)}\ndim={data.shape[1] if data.size else 0}\noutput={args.output}")
    return 0


def cmd_gen_synthetic(args) -> int:
    from metashard.bench import synthetic

    queries = None
    if args.kind == "uniform":
        items = synthetic.uniform(args.n, args.dim, seed=args.seed)
        if args.queries:
            queries = synthetic.uniform(args.queries, args.dim, seed=args.seed + 7919)
    elif args.kind == "gaussian":
        items, queries = synthetic.gaussian_mixture(
            args.n, args.dim, n_clusters=args.clusters, spread=args.spread, seed=args.seed,
            n_queries=args.queries)
    elif args.kind == "lognormal":
        items, queries = synthetic.lognormal_mips(
            args.n, args.dim, n_clusters=args.clusters, sigma=args.sigma, seed=args.seed,
            n_queries=args.queries)
    else:
        items = synthetic.dominant_norm(args.n, args.dim, seed=args.seed)
        if args.queries:
            rng = np.random.default_rng(args.seed + 7919)
            queries = rng.normal(size=(args.queries, args.dim)).astype(np.float32)
    save_dataset(args.output, items)
    print(f"items={len(items)}\ndim={args.dim}\noutput={args.output}")
    if args.query_output and queries is not None and len(queries):
        save_dataset(args.query_output, queries)
        print(f"queries={len(queries)}\nquery_output={args.query_output}")
    return 0


def cmd_ground_truth(args) -> int:
    from metashard.bench.groundtruth import ground_truth
    from metashard.bench.io import write_vectors
    from metashard.metric import MetricKind

    gt = ground_truth(load_dataset(args.data), load_dataset(args.queries), args.k,
                      MetricKind.parse(args.metric))
    write_vectors(args.output, gt.ids.astype(np.int32), "ivecs")
    print(f"queries={len(gt)}\nk={gt.k}\nmetric={gt.metric.label}\noutput={args.output}")
    return 0


def _index_params(args):
    from metashard.partition import IndexParams

    return IndexParams(n_prime=args.n_prime, m=args.m, w=args.w, epsilon=args.epsilon,
                       kmeans_iters=args.kmeans_iters, r=args.r, seed=args.seed, M=args.M,
                       M0=args.M0, build_l=args.build_l, assign_l=args.assign_l)


def cmd_build_index(args) -> int:
    from metashard.metric import MetricKind
    from metashard.partition import build_index, build_index_mips

    data = load_dataset(args.data)
    metric = MetricKind.parse(args.metric)
    params = _index_params(args)
    t0 = time.perf_counter()
    if metric is MetricKind.INNER_PRODUCT:
        index = build_index_mips(data, params)
    else:
        index = build_index(data, metric, params)
    index.save(args.out)
    sizes = [len(s) for s in index.shards]
    print(f"kind=routed\nmetric={metric.label}\nw={index.w}\nitems={len(data)}\n"
          f"stored={sum(sizes)}\noverhead={sum(sizes) / len(data) - 1:.6f}\n"
          f"shard_counts={','.join(map(str, sizes))}\n"
          f"build_seconds={time.perf_counter() - t0:.2f}\nout={args.out}")
    return 0


def cmd_build_naive(args) -> int:
    from metashard.metric import MetricKind
    from metashard.partition import build_naive

    data = load_dataset(args.data)
    metric = MetricKind.parse(args.metric)
    index = build_naive(data, metric, args.w, seed=args.seed, M=args.M, M0=args.M0,
                        build_l=args.build_l)
    index.save(args.out)
    print(f"kind=naive\nmetric={metric.label}\nw={index.w}\nitems={len(data)}\nout={args.out}")
    return 0


def _truth_for(args, queries):
    from metashard.bench.groundtruth import GroundTruth
    from metashard.bench.io import read_vectors

    if not args.truth:
        return None
    ids = read_vectors(args.truth, "ivecs").astype(np.int64)
    if len(ids) < len(queries):
        raise SystemExit("ground truth has fewer rows than queries")
    return GroundTruth(ids, np.zeros(ids.shape), None)


def cmd_bench(args) -> int:
    from metashard.bench.harness import run_benchmark
    from metashard.bench.metrics import reports_to_csv
    from metashard.partition import ShardedIndex

    queries = load_dataset(args.queries)
    if args.limit:
        queries = queries[: args.limit]
    truth = _truth_for(args, queries)
    if truth is not None and truth.k < args.k:
        raise SystemExit(f"ground truth holds {truth.k} neighbors, fewer than k={args.k}")
    client = None
    if args.config:
        from metashard.cluster.client import ClusterClient
        from metashard.cluster.config import load_config

        cfg = load_config(args.config)
        client = ClusterClient(cfg.registry, timeout=args.timeout)
        targets = [("cluster", client)]
    else:
        targets = [("routed", ShardedIndex.load(args.index))]
    if args.baseline:
        targets.append(("naive", ShardedIndex.load(args.baseline)))
    reports, labels = [], []
    for label, target in targets:
        K = target.w if label == "naive" else args.K
        rep = run_benchmark(target, queries, K=K, k=args.k, l=args.l,
                            concurrency=args.concurrency, duration=args.duration,
                            truth=truth, meta_l=args.meta_l)
        rep.config["target"] = label
        reports.append(rep)
        labels.append({"target": label})
        text = rep.to_lines()
        sys.stdout.write(f"# {label}\n{text}")
    if args.report:
        Path(args.report).write_text("".join(f"# {l['target']}\n{r.to_lines()}"
                                             for l, r in zip(labels, reports)))
    if args.csv:
        Path(args.csv).write_text(reports_to_csv(reports, labels))
    if client is not None:
        client.close()
    return 0


def cmd_norm_bias(args) -> int:
    from metashard.bench.normbias import mips_norm_bias_report

    rep = mips_norm_bias_report(load_dataset(args.data), load_dataset(args.queries), args.k,
                                args.buckets)
    _write(args.report, rep.to_lines())
    if args.csv:
        rows = ["bucket_low,bucket_high,share"]
        rows += [f"{rep.edges[b]:g},{rep.edges[b + 1]:g},{s:.6f}" for b, s in enumerate(rep.shares)]
        Path(args.csv).write_text("\n".join(rows) + "\n")
    return 0


def cmd_inject(args) -> int:
    from metashard.cluster.config import load_config
    from metashard.cluster.net import RpcClient
    from metashard.cluster.registry import RegistryClient
    from metashard.errors import NotFoundError

    cfg = load_config(args.config)
    if not cfg.benchmark_mode:
        print("fault injection is disabled unless benchmark_mode=true", file=sys.stderr)
        return 2
    reg = RegistryClient(cfg.registry)
    leases = {l["role"]: l for l in reg.list("")}
    reg.close()
    role = args.instance
    if role not in leases:
        raise NotFoundError(f"no live instance holds {role}")
    meta = leases[role]["meta"]
    if args.what == "straggler":
        if "control" not in meta:
            raise NotFoundError(f"{role} has no control port (not an executor)")
        rpc = RpcClient(meta["control"])
        resp, _ = rpc.call({"op": "slowdown", "factor": args.factor})
        rpc.close()
        if not resp.get("ok"):
            print(resp.get("error"), file=sys.stderr)
            return 1
        print(f"instance={role}\nslowdown={args.factor}")
    else:
        os.kill(int(meta["pid"]), signal.SIGKILL)
        print(f"instance={role}\nkilled_pid={meta['pid']}")
    return 0


# -- process entry points ---------------------------------------------------------

def cmd_services(args) -> int:
    from metashard.cluster.broker import Broker, BrokerServer
    from metashard.cluster.config import load_config
    from metashard.cluster.registry import Registry, RegistryServer
    from metashard.cluster.wire import parse_address

    cfg = load_config(args.config)
    servers = []
    addrs = {}
    if args.what in ("services", "broker"):
        host, port = parse_address(cfg.broker)
        if args.broker_port is not None:
            port = args.broker_port
        b = BrokerServer(Broker(cfg.rebalance_ms, cfg.message_ttl_ms, cfg.session_ms), host, port)
        servers.append(b.start())
        addrs["broker"] = b.address
    if args.what in ("services", "registry"):
        host, port = parse_address(cfg.registry)
        if args.registry_port is not None:
            port = args.registry_port
        r = RegistryServer(Registry(cfg.registry_check_ms), host, port)
        servers.append(r.start())
        addrs["registry"] = r.address
    if args.address_file:
        tmp = args.address_file + ".tmp"
        Path(tmp).write_text(json.dumps(addrs))
        os.replace(tmp, args.address_file)
    print(json.dumps(addrs), flush=True)
    done = threading.Event()
    _install_signal_handlers(done.set)
    done.wait()
    for s in servers:
        s.stop()
    return 0


def cmd_executor(args) -> int:
    from metashard.cluster.config import load_config
    from metashard.cluster.executor import Executor
    from metashard.errors import ConnectivityError, LeaseHeldError

    cfg = load_config(args.config)
    ex = Executor(cfg, args.shard, args.replica, host_label=args.host)
    try:
        ex.start()
    except LeaseHeldError as exc:
        logger.warning("exiting: %s", exc)
        return 0
    except ConnectivityError as exc:
        logger.error("cannot start: %s", exc)
        return 1
    _install_signal_handlers(ex._on_lost)
    ex.wait()
    ex.stop()
    return 0


def cmd_coordinator(args) -> int:
    from metashard.cluster.config import load_config
    from metashard.cluster.coordinator import Coordinator
    from metashard.errors import ConnectivityError, LeaseHeldError

    cfg = load_config(args.config)
    coord = Coordinator(cfg, coord_id=args.id)
    try:
        coord.start()
    except LeaseHeldError as exc:
        logger.warning("exiting: %s", exc)
        coord.stopping = True
        return 0
    except ConnectivityError as exc:
        logger.error("cannot start: %s", exc)
        return 1
    done = threading.Event()
    _install_signal_handlers(done.set)
    while not done.wait(0.2):
        if coord.stopping:
            break
    coord.stop()
    return 0


def cmd_master(args) -> int:
    from metashard.cluster.config import load_config
    from metashard.cluster.master import Master

    cfg = load_config(args.config)
    m = Master(cfg, os.path.abspath(args.config))
    _install_signal_handlers(m.stop)
    m.run()
    return 0


# -- parser --------------------------------------------------------------------------

def _add_graph_args(p) -> None:
    p.add_argument("--M", type=int, default=16, help="upper-layer degree cap")
    p.add_argument("--M0", type=int, default=32, help="layer-0 degree cap")
    p.add_argument("--build-l", type=int, default=100, help="search width during insertion")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metashard", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert an fvecs/bvecs/ivecs file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help=".npy or vector file")
    p.add_argument("--format", choices=["fvecs", "bvecs", "ivecs"])
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-synthetic", help="write a seeded synthetic dataset")
    p.add_argument("--kind", choices=["uniform", "gaussian", "lognormal", "dominant"],
                   default="gaussian")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", type=int, default=64)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--queries", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--query-output")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("ground-truth", help="exact top-k by linear scan")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--output", required=True, help="ivecs file of neighbor ids")
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("build-index", help="build a routed sharded index")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--m", type=int, required=True, help="number of routing centers")
    p.add_argument("--w", type=int, required=True, help="number of shards")
    p.add_argument("--n-prime", type=int, required=True, help="clustering sample size")
    p.add_argument("--r", type=int, default=0, help="inner-product replicas per center")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.05, help="partition balance slack")
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--assign-l", type=int, default=50)
    _add_graph_args(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("build-index-naive", help="random split baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_graph_args(p)
    p.set_defaults(func=cmd_build_naive)

    p = sub.add_parser("bench", help="replay queries and report")
    tgt = p.add_mutually_exclusive_group(required=True)
    tgt.add_argument("--index", help="index directory, searched in-process")
    tgt.add_argument("--config", help="cluster config; queries go through a coordinator")
    p.add_argument("--queries", required=True)
    p.add_argument("--truth", help="ivecs ground truth for precision")
    p.add_argument("--K", type=int, default=1, help="branching factor")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=100, help="shard search width")
    p.add_argument("--meta-l", type=int, default=None)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--duration", type=float, default=None, help="seconds; default one pass")
    p.add_argument("--baseline", help="naive index directory to compare against")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--report", help="key=value report file")
    p.add_argument("--csv", help="comma-separated report file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("norm-bias", help="share of exact inner-product hits by norm percentile")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--buckets", type=int, default=20)
    p.add_argument("--report")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_norm_bias)

    p = sub.add_parser("inject", help="fault injection (benchmark_mode only)")
    p.add_argument("what", choices=["straggler", "failure"])
    p.add_argument("--config", required=True)
    p.add_argument("--instance", "--executor", dest="instance", required=True,
                   help="role, e.g. executor/3/1")
    p.add_argument("--factor", type=float, default=10.0)
    p.set_defaults(func=cmd_inject)

    for name in ("services", "broker", "registry"):
        p = sub.add_parser(name, help=f"run the {name} process")
        p.add_argument("--config", required=True)
        p.add_argument("--broker-port", type=int)
        p.add_argument("--registry-port", type=int)
        p.add_argument("--address-file")
        p.set_defaults(func=cmd_services, what=name)

    p = sub.add_parser("executor", help="serve one shard replica")
    p.add_argument("--config", required=True)
    p.add_argument("--shard", type=int, required=True)
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--host", default="local")
    p.set_defaults(func=cmd_executor)

    p = sub.add_parser("coordinator", help="route and gather queries")
    p.add_argument("--config", required=True)
    p.add_argument("--id", type=int, default=0)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("master", help="monitor leases and respawn instances")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_master)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from metashard.errors import MetashardError

    try:
        return int(args.func(args) or 0)
    except MetashardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
