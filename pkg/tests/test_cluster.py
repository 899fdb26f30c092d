import threading
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metashard.bench import synthetic
from metashard.cli import main as cli_main
from metashard.cluster import wire
from metashard.cluster.broker import Broker, BrokerClient, BrokerServer, Subscription
from metashard.cluster.client import ClusterClient, _error_from
from metashard.cluster.config import ClusterConfig, load_config, parse_config
from metashard.cluster.coordinator import Coordinator
from metashard.cluster.executor import Executor, executor_role, parse_role
from metashard.cluster.master import Master, replica_host, slot_roles
from metashard.cluster.registry import (
    LeaseKeeper,
    Registry,
    RegistryClient,
    RegistryServer,
)
from metashard.errors import (
    LeaseHeldError,
    NotFoundError,
    PartialTimeoutError,
    ProtocolError,
    ShardUnavailableError,
)
from metashard.metric import MetricKind
from metashard.partition import IndexParams, ShardedIndex, build_index

finite = st.floats(-1e6, 1e6, width=32)


def wait_for(pred, timeout=5.0, step=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()


# -- wire format -------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**63), arrays(np.float32, st.integers(1, 32), elements=finite),
       st.integers(1, 100), st.integers(1, 1000), st.integers(0, 2**40))
def test_request_roundtrip(qid, vec, k, l, epoch):
    req = wire.QueryRequest(qid, vec, k, l, "10.0.0.7:9000", epoch)
    out = wire.decode_request(wire.payload_of(wire.encode_request(req)))
    assert (out.query_id, out.k, out.search_l, out.reply_to, out.epoch) == (qid, k, l,
                                                                            req.reply_to, epoch)
    np.testing.assert_array_equal(out.vector, vec)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 50).flatmap(lambda n: st.tuples(
    arrays(np.int64, n, elements=st.integers(0, 2**40)),
    arrays(np.float64, n, elements=st.floats(-1e9, 1e9)))),
    st.one_of(st.none(), st.integers(0, 2**40)))
def test_partial_roundtrip(hits, evals):
    ids, scores = hits
    part = wire.PartialResult(7, 3, ids, scores, 2, evals)
    out = wire.decode_partial(wire.payload_of(wire.encode_partial(part)))
    assert (out.query_id, out.shard_id, out.epoch, out.evaluations) == (7, 3, 2, evals)
    np.testing.assert_array_equal(out.ids, ids)
    np.testing.assert_array_equal(out.scores, scores)


def test_partial_without_trailer_decodes_as_none():
    part = wire.PartialResult(1, 0, np.array([4]), np.array([0.5]), 1, None)
    assert wire.decode_partial(wire.payload_of(wire.encode_partial(part))).evaluations is None


def test_client_messages_roundtrip():
    cq = wire.ClientQuery(9, np.arange(4, dtype=np.float32), 2, 10, 80, 50)
    out = wire.decode_client_query(wire.payload_of(wire.encode_client_query(cq)))
    assert (out.query_id, out.K, out.k, out.l, out.meta_l) == (9, 2, 10, 80, 50)
    cr = wire.ClientResult(9, True, np.array([1, 2]), np.array([0.5, 0.25]), 123, (0, 3))
    back = wire.decode_client_result(wire.payload_of(wire.encode_client_result(cr)))
    assert back.ok and back.evaluations == 123 and tuple(back.shards) == (0, 3)
    err = wire.ClientResult(9, False, np.empty(0, np.int64), np.empty(0), error="X: y")
    assert wire.decode_client_result(wire.payload_of(wire.encode_client_result(err))).error == "X: y"


def test_control_roundtrip():
    framed = wire.encode_control({"op": "publish", "topics": [1, 2]}, [b"a", b"", b"xyz"])
    msg, blobs = wire.decode_control(wire.payload_of(framed))
    assert msg == {"op": "publish", "topics": [1, 2]} and blobs == [b"a", b"", b"xyz"]


@pytest.mark.parametrize("bad", [
    b"",
    b"\x01" + b"\x00" * 5,
    wire.payload_of(wire.encode_request(
        wire.QueryRequest(1, np.ones(4, np.float32), 1, 1, "h:1")))[:-3],
])
def test_truncated_request_raises(bad):
    with pytest.raises(ProtocolError):
        wire.decode_request(bad)


def test_wrong_frame_type_raises():
    payload = wire.payload_of(wire.encode_control({"op": "ping"}))
    with pytest.raises(ProtocolError):
        wire.decode_partial(payload)


def test_payload_of_rejects_bad_prefix():
    with pytest.raises(ProtocolError):
        wire.payload_of(b"\x09\x00\x00\x00abc")


def test_address_helpers():
    assert wire.parse_address("127.0.0.1:7100") == ("127.0.0.1", 7100)
    assert wire.format_address("::1", 5) in ("[::1]:5", "::1:5")
    with pytest.raises(ValueError):
        wire.parse_address("nohost")


# -- config and placement -----------------------------------------------------------

def test_config_text_roundtrip(tmp_path):
    cfg = ClusterConfig(replicas=2, benchmark_mode=True, hosts="a,b,c", index_dir="idx")
    cfg.extra["note"] = "x"
    cfg.save(tmp_path / "c.conf")
    back = load_config(tmp_path / "c.conf")
    assert back.replicas == 2 and back.benchmark_mode is True
    assert back.host_list == ["a", "b", "c"] and back.extra == {"note": "x"}
    assert back.index_dir == str((tmp_path / "idx").resolve())


@pytest.mark.parametrize("text", ["replicas=two", "benchmark_mode=maybe", "no equals sign"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_config_defaults():
    cfg = parse_config("# comment only\n")
    assert (cfg.lease_ms, cfg.renew_ms, cfg.rebalance_ms, cfg.gather_timeout_ms) == (2000, 500,
                                                                                   500, 100)


@pytest.mark.parametrize("shard,replica,hosts,expected", [
    (0, 0, ["h0", "h1", "h2", "h3"], "h0"),
    (0, 1, ["h0", "h1", "h2", "h3"], "h2"),
    (3, 1, ["h0", "h1", "h2", "h3"], "h1"),
    (2, 1, ["h0", "h1", "h2"], "h0"),
    (5, 0, ["only"], "only"),
])
def test_replica_host(shard, replica, hosts, expected):
    assert replica_host(shard, replica, hosts, replicas=2) == expected


def test_replica_host_no_hosts():
    assert replica_host(0, 0, [], 2) is None


def test_replicas_of_a_shard_land_on_different_hosts():
    hosts = [f"h{i}" for i in range(6)]
    for s in range(12):
        assert replica_host(s, 0, hosts, 2) != replica_host(s, 1, hosts, 2)


def test_roles():
    assert executor_role(3, 1) == "executor/3/1"
    assert parse_role("executor/3/1") == ("executor", [3, 1])
    assert slot_roles(2, 2, 1) == ["executor/0/0", "executor/0/1", "executor/1/0",
                                   "executor/1/1", "coordinator/0"]


# -- broker --------------------------------------------------------------------------

def drain(b, topic, member, epoch=1, max_n=100):
    out = []
    while True:
        got = b.fetch(topic, member, epoch, max_n, 0.0)
        if not got:
            return out
        out.extend(got)
        b.fetch(topic, member, epoch, 0, 0.0, done=len(got))


def test_single_member_receives_in_order():
    b = Broker()
    assert b.join(0, "a", 1)
    msgs = [f"m{i}".encode() for i in range(20)]
    for m in msgs:
        b.publish(0, m)
    assert drain(b, 0, "a") == msgs


def test_equal_members_split_evenly():
    b = Broker()
    b.join(0, "a", 1)
    b.join(0, "b", 1)
    for i in range(1000):
        b.publish(0, str(i).encode())
    a, c = drain(b, 0, "a", max_n=1000), drain(b, 0, "b", max_n=1000)
    assert abs(len(a) - 500) <= 100 and len(a) + len(c) == 1000


def _consumer(b, topic, member, delay, got, stop):
    while not stop.is_set():
        msgs = b.fetch(topic, member, 1, 1, 0.05)
        if msgs is None:
            return
        for m in msgs:
            time.sleep(delay)
            got.append(m)
        if msgs:
            b.fetch(topic, member, 1, 0, 0.0, done=len(msgs))


def test_slow_member_gets_small_share():
    b = Broker(rebalance_ms=50).start()
    b.join(0, "fast", 1)
    b.join(0, "slow", 1)
    fast, slow, stop = [], [], threading.Event()
    threads = [threading.Thread(target=_consumer, args=(b, 0, "fast", 0.001, fast, stop)),
               threading.Thread(target=_consumer, args=(b, 0, "slow", 0.010, slow, stop))]
    for t in threads:
        t.start()
    for i in range(1000):
        b.publish(0, str(i).encode())
        time.sleep(0.0012)
    assert wait_for(lambda: len(fast) + len(slow) == 1000, timeout=20)
    stop.set()
    b.stop()
    for t in threads:
        t.join()
    assert len(slow) / 1000 < 0.25


def test_no_loss_or_duplicates_under_membership_changes():
    b = Broker(rebalance_ms=20).start()
    got: dict[str, list] = {}
    stops: dict[str, threading.Event] = {}
    threads = []

    def add(name):
        got[name], stops[name] = [], threading.Event()
        b.join(0, name, 1)
        t = threading.Thread(target=_consumer, args=(b, 0, name, 0.0005, got[name], stops[name]))
        t.start()
        threads.append(t)

    def remove(name):
        b.leave(0, name)
        stops[name].set()

    add("m0")
    for i in range(600):
        b.publish(0, str(i).encode())
        if i == 100:
            add("m1")
        elif i == 200:
            add("m2")
        elif i == 300:
            remove("m0")
        elif i == 450:
            remove("m1")
            add("m3")
        time.sleep(0.0005)
    total = lambda: sum(len(v) for v in got.values())  # noqa: E731
    assert wait_for(lambda: total() == 600, timeout=20)
    for s in stops.values():
        s.set()
    b.stop()
    for t in threads:
        t.join()
    counts = Counter(m for v in got.values() for m in v)
    assert len(counts) == 600 and set(counts.values()) == {1}


def test_messages_wait_for_a_member_then_expire():
    b = Broker(ttl_ms=100)
    assert b.publish(0, b"early") is False
    b.join(0, "a", 1)
    assert drain(b, 0, "a") == [b"early"]
    b.leave(0, "a")
    b.publish(0, b"late")
    time.sleep(0.15)
    b.tick()
    assert b.stats()["0"]["expired"] == 1
    b.join(0, "a", 2)
    assert drain(b, 0, "a", epoch=2) == []


def test_stale_epoch_is_fenced():
    b = Broker()
    assert b.join(0, "executor/0/0", 2)
    assert not b.join(0, "executor/0/0", 1)
    assert b.fetch(0, "executor/0/0", 1, 1, 0.0) is None
    assert b.fetch(0, "executor/0/0", 2, 1, 0.0) == []


def test_rejoin_with_new_epoch_replaces_member():
    b = Broker()
    b.join(0, "x", 1)
    b.publish(0, b"m")
    b.join(0, "x", 2)
    assert b.fetch(0, "x", 1, 1, 0.0) is None
    assert b.fetch(0, "x", 2, 1, 0.0) == [b"m"]


def test_silent_member_expires_and_work_moves():
    b = Broker(session_ms=100)
    b.join(0, "quiet", 1)
    b.join(0, "busy", 1)
    for i in range(10):
        b.publish(0, str(i).encode())
    time.sleep(0.05)
    b.fetch(0, "busy", 1, 0, 0.0)
    time.sleep(0.07)
    b.fetch(0, "busy", 1, 0, 0.0)
    b.tick()
    assert "quiet" not in b.stats()["0"]["members"]
    assert len(drain(b, 0, "busy")) == 10


def test_disconnect_requeues_over_tcp():
    srv = BrokerServer(Broker()).start()
    try:
        s1, s2 = Subscription(srv.address, 0, "a", 1), Subscription(srv.address, 0, "b", 1)
        assert s1.join() and s2.join()
        pub = BrokerClient(srv.address)
        pub.publish_many([0] * 6, [bytes([i]) for i in range(6)])
        s1.close()  # abrupt: no leave
        assert wait_for(lambda: "a" not in srv.broker.stats()["0"]["members"])
        got = []
        while len(got) < 6:
            batch = s2.fetch(max_n=10, wait_ms=200)
            assert batch
            got.extend(batch)
            s2.ack(len(batch))
        assert sorted(got) == [bytes([i]) for i in range(6)]
        pub.close()
        s2.close()
    finally:
        srv.stop()


# -- registry -------------------------------------------------------------------------

@pytest.fixture
def registry():
    srv = RegistryServer(Registry(check_ms=20)).start()
    yield srv
    srv.stop()


def test_lease_epochs_and_conflicts(registry):
    c = RegistryClient(registry.address)
    assert c.acquire("executor/0/0", "h1", 300) == 1
    with pytest.raises(LeaseHeldError):
        c.acquire("executor/0/0", "h2", 300)
    assert c.acquire("executor/0/0", "h1", 300) == 1  # same holder re-acquires
    assert c.release("executor/0/0", "h1", 1)
    assert c.acquire("executor/0/0", "h2", 300) == 2
    c.close()


def test_expiry_is_observed_within_two_lease_periods(registry):
    c = RegistryClient(registry.address)
    _, since = c.watch(0, 0)
    c.acquire("coordinator/0", "h1", 200)
    t0 = time.monotonic()
    seen = None
    while time.monotonic() - t0 < 1.0 and seen is None:
        events, since = c.watch(since, 100)
        seen = next((e for e in events if e["type"] == "expired"), None)
    assert seen is not None and seen["role"] == "coordinator/0"
    assert time.monotonic() - t0 <= 2 * 0.2
    assert c.list("coordinator/") == []
    assert c.acquire("coordinator/0", "h2", 200) == 2
    with pytest.raises(NotFoundError):
        c.renew("coordinator/0", "h1", 1, 200)
    c.close()


def test_lease_keeper_renews_and_releases(registry):
    k = LeaseKeeper(registry.address, "master", ttl_ms=200, renew_ms=50)
    assert k.acquire() == 1
    time.sleep(0.5)
    c = RegistryClient(registry.address)
    assert [l["role"] for l in c.list()] == ["master"]
    k.release()
    assert c.list() == []
    c.close()


def test_lease_keeper_reports_loss(registry):
    lost = threading.Event()
    k = LeaseKeeper(registry.address, "master", ttl_ms=200, renew_ms=50, on_lost=lost.set)
    k.acquire()
    registry.registry.release("master", k.holder, k.epoch)  # lease taken away
    assert lost.wait(1.0) and k.lost.is_set()
    k.release()


def test_lease_keeper_loses_when_registry_unreachable():
    srv = RegistryServer(Registry(check_ms=20)).start()
    lost = threading.Event()
    k = LeaseKeeper(srv.address, "x", ttl_ms=200, renew_ms=50, on_lost=lost.set)
    k.acquire()
    srv.stop()
    assert lost.wait(2.0)
    k.abandon()


# -- coordinator and executors in one process --------------------------------------------

@pytest.fixture(scope="module")
def small_cluster_index(tmp_path_factory):
    items, queries = synthetic.gaussian_mixture(2000, 8, n_clusters=10, spread=1.0, seed=6,
                                                n_queries=30)
    index = build_index(items, MetricKind.EUCLIDEAN_NEG,
                        IndexParams(n_prime=800, m=16, w=4, seed=2, build_l=40))
    d = tmp_path_factory.mktemp("cidx")
    index.save(d)
    return ShardedIndex.load(d), str(d), queries


@pytest.fixture
def services(small_cluster_index):
    b = BrokerServer(Broker(rebalance_ms=100, session_ms=1000)).start()
    r = RegistryServer(Registry(check_ms=20)).start()
    cfg = ClusterConfig(broker=b.address, registry=r.address, index_dir=small_cluster_index[1],
                        lease_ms=600, renew_ms=150, gather_timeout_ms=1000)
    started = []
    yield cfg, started
    for x in started:
        x.stop()
    b.stop()
    r.stop()


def test_coordinator_matches_in_process_search(services, small_cluster_index):
    cfg, started = services
    index, _, queries = small_cluster_index
    started += [Executor(cfg, s).start() for s in range(4)]
    coord = Coordinator(cfg).start()
    started.append(coord)
    for q in queries:
        for K in (1, 3):
            got, want = coord.execute(q, K=K, k=10, l=60), index.search(q, K=K, k=10, l=60)
            assert got.ids.tolist() == want.ids.tolist()
            assert got.evaluations == want.evaluations and got.shards == want.shards


def test_client_roundtrip_and_errors(services, small_cluster_index):
    cfg, started = services
    index, _, queries = small_cluster_index
    started += [Executor(cfg, s).start() for s in range(4)]
    started.append(Coordinator(cfg).start())
    client = ClusterClient(cfg.registry, timeout=5.0)
    assert client.w == 4 and client.dim == 8
    res = client.search(queries[0], K=2, k=5, l=60)
    assert res.ids.tolist() == index.search(queries[0], K=2, k=5, l=60).ids.tolist()
    with pytest.raises(Exception) as info:
        client.search(np.zeros(3), K=1)
    assert type(info.value).__name__ == "DimensionError"
    client.close()


def test_error_names_rebuild_types():
    assert isinstance(_error_from("ShardUnavailableError: gone"), ShardUnavailableError)
    exc = _error_from("PartialTimeoutError: late")
    assert isinstance(exc, PartialTimeoutError) and str(exc) == "late"
    assert type(_error_from("Weird: x")).__name__ == "MetashardError"


def test_missing_shard_raises_unavailable(services):
    cfg, started = services
    started += [Executor(cfg, s).start() for s in range(3)]
    coord = Coordinator(cfg, metric=MetricKind.EUCLIDEAN_NEG, w=4, dim=8).start()
    started.append(coord)
    with pytest.raises(ShardUnavailableError):
        coord.execute(np.zeros(8, np.float32))


def test_silent_shard_times_out_with_partials(services):
    cfg, started = services
    started += [Executor(cfg, s).start() for s in range(3)]
    silent = LeaseKeeper(cfg.registry, executor_role(3, 0), 600, 150)
    silent.acquire()  # live lease, nobody consuming
    coord = Coordinator(cfg, metric=MetricKind.EUCLIDEAN_NEG, w=4, dim=8).start()
    started.append(coord)
    t0 = time.monotonic()
    with pytest.raises(PartialTimeoutError) as info:
        coord.execute(np.zeros(8, np.float32), timeout=0.1)
    assert time.monotonic() - t0 < 0.5
    assert info.value.missing == {3} and len(info.value.partials) == 3
    silent.release()


def test_stale_epoch_partial_is_rejected(services):
    cfg, started = services
    coord = Coordinator(cfg, metric=MetricKind.EUCLIDEAN_NEG, w=1, dim=2).start()
    started.append(coord)
    old = LeaseKeeper(cfg.registry, executor_role(0, 0), 600, 150)
    old.acquire()
    old.release()
    new = LeaseKeeper(cfg.registry, executor_role(0, 0), 600, 150)
    assert new.acquire() == 2
    results = []
    qid = coord.execute_async(np.ones(2, np.float32), 1, 3, results.append, timeout=2.0)
    ids, scores = np.array([5]), np.array([-1.0])
    assert not coord.accept_partial(wire.PartialResult(qid, 0, ids, scores, epoch=1))
    assert coord.rejected_stale == 1 and results == []
    assert coord.accept_partial(wire.PartialResult(qid, 0, ids, scores, epoch=2, evaluations=4))
    assert len(results) == 1 and results[0].ids.tolist() == [5] and results[0].evaluations == 4
    new.release()


def test_callback_fires_once_under_racing_timeouts(services):
    cfg, started = services
    started += [Executor(cfg, s).start() for s in range(4)]
    coord = Coordinator(cfg).start()
    started.append(coord)
    calls: Counter = Counter()
    lock = threading.Lock()

    def make_cb(i):
        def cb(r):
            with lock:
                calls[i] += 1
        return cb

    rng = np.random.default_rng(0)
    # zero and near-zero timeouts race the timer against arriving partials
    qids = [coord.execute_async(rng.normal(size=8), 4, 10, make_cb(i), timeout=0.0005 * (i % 7))
            for i in range(200)]
    assert len(set(qids)) == 200
    assert wait_for(lambda: sum(calls.values()) == 200, timeout=10)
    time.sleep(0.3)
    assert set(calls) == set(range(200)) and set(calls.values()) == {1}
    assert coord.completed + coord.failed == 200


def test_merge_dedups_and_counts(services):
    cfg, started = services
    coord = Coordinator(cfg, metric=MetricKind.INNER_PRODUCT, w=2, dim=2).start()
    started.append(coord)
    ka, kb = (LeaseKeeper(cfg.registry, executor_role(s, 0), 600, 150) for s in (0, 1))
    ka.acquire()
    kb.acquire()
    out = []
    qid = coord.execute_async(np.ones(2, np.float32), 1, 3, out.append, timeout=2.0)
    coord.accept_partial(wire.PartialResult(qid, 0, np.array([7, 2]), np.array([3.0, 1.0]), 1, 10))
    coord.accept_partial(wire.PartialResult(qid, 1, np.array([7, 4]), np.array([3.0, 2.0]), 1, 5))
    assert out[0].ids.tolist() == [7, 4, 2] and out[0].evaluations == 15
    ka.release()
    kb.release()


# -- master (spawning stubbed out) ---------------------------------------------------------

class _FakeProc:
    def __init__(self):
        self.code = None

    def poll(self):
        return self.code


def test_master_fills_empty_slots_once(services):
    cfg, _ = services
    cfg.replicas = 2
    spawned = []
    m = Master(cfg, "unused.conf", spawn=lambda role: spawned.append(role) or _FakeProc())
    assert sorted(m.reconcile()) == sorted(slot_roles(4, 2, 1))
    assert m.reconcile() == []  # still in the grace period
    m._children["executor/1/1"][0].code = 1  # died before registering
    assert m.reconcile() == ["executor/1/1"]
    cmd = m.command("executor/3/1")
    assert cmd[-6:] == ["--shard", "3", "--replica", "1", "--host", "local"]
    m.stop()


def test_master_skips_live_leases(services):
    cfg, _ = services
    k = LeaseKeeper(cfg.registry, executor_role(2, 0), 600, 150)
    k.acquire()
    m = Master(cfg, "unused.conf", spawn=lambda role: _FakeProc())
    assert "executor/2/0" not in m.reconcile()
    m.stop()
    k.release()


def test_master_alerts_without_hosts(services):
    cfg, _ = services
    cfg.hosts = ""
    m = Master(cfg, "unused.conf", spawn=lambda role: _FakeProc())
    started = m.reconcile()
    assert started and all(r.startswith("coordinator") for r in m._children)
    assert len(m.alerts) == 4
    m.stop()


def test_standby_master_takes_over(services):
    cfg, _ = services
    cfg.lease_ms, cfg.renew_ms, cfg.monitor_ms = 400, 100, 200
    masters = [Master(cfg, "unused.conf", spawn=lambda role: _FakeProc()) for _ in range(2)]
    threads = [threading.Thread(target=m.run, daemon=True) for m in masters]
    for t in threads:
        t.start()
    assert wait_for(lambda: sum(m.active.is_set() for m in masters) == 1)
    active = next(m for m in masters if m.active.is_set())
    standby = next(m for m in masters if m is not active)
    time.sleep(0.3)
    assert not standby.active.is_set()
    active._stop.set()
    active._lease.abandon()  # crash: lease is left to expire
    t0 = time.monotonic()
    assert wait_for(standby.active.is_set, timeout=2.0)
    assert time.monotonic() - t0 <= 2 * 0.4 + 0.15
    standby.stop()


# -- local multi-process cluster ----------------------------------------------------------------

@pytest.mark.cluster
def test_local_cluster_end_to_end(small_cluster_index, tmp_path):
    from metashard.cluster.local import LocalCluster

    index, index_dir, queries = small_cluster_index
    with LocalCluster(index_dir, tmp_path, replicas=2, masters=2, benchmark_mode=True) as lc:
        client = lc.client()
        for q in queries[:10]:
            assert client.search(q, K=2, k=10, l=60).ids.tolist() == \
                index.search(q, K=2, k=10, l=60).ids.tolist()
        # straggler injection through the command line
        assert cli_main(["inject", "straggler", "--config", str(lc.config_path),
                         "--executor", "executor/1/0", "--factor", "4"]) == 0
        assert lc.executor_stats("executor/1/0")["slowdown"] == 4.0
        # a killed executor comes back with a new epoch
        before = lc.leases()["executor/0/1"]["epoch"]
        lc.kill("executor/0/1")
        assert wait_for(lambda: lc.leases().get("executor/0/1", {}).get("epoch", before) > before,
                        timeout=20)
        client.close()
        # the bench command drives the cluster through a coordinator
        qpath = tmp_path / "q.npy"
        np.save(qpath, queries[:5])
        assert cli_main(["bench", "--config", str(lc.config_path), "--queries", str(qpath),
                         "--K", "2", "--k", "5"]) == 0
