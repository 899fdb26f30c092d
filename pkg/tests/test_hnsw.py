import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_topk
from metashard.errors import (
    DimensionError,
    DuplicateIdError,
    EmptyIndexError,
    EmptyInputError,
    IndexFormatError,
    InvalidEntryError,
)
from metashard.hnsw import HnswGraph, draw_level
from metashard.hnsw.graph import MAGIC
from metashard.metric import MetricKind, score


def recall(graph, items, queries, k=10, l=100, metric=MetricKind.EUCLIDEAN_NEG):
    hits = 0
    for q in queries:
        truth = set(brute_topk(items, q, k, metric).tolist())
        hits += len(truth & set(graph.search(q, k, l).ids.tolist()))
    return hits / (k * len(queries))


# -- draw_level ---------------------------------------------------------------


@pytest.mark.parametrize("norm", [0.0, 0.3, 1 / math.log(16), 5.0])
def test_draw_level_unit_draw_is_zero(norm):
    assert draw_level(1.0, norm) == 0


@pytest.mark.parametrize("u", [1e-9, 0.01, 0.5, 0.999])
def test_draw_level_zero_norm(u):
    assert draw_level(u, 0.0) == 0


def test_draw_level_formula():
    assert draw_level(math.exp(-2.5), 1.0) == 2
    assert draw_level(0.5, 1 / math.log(2)) == 1


def test_draw_level_rejects_out_of_range():
    with pytest.raises(ValueError):
        draw_level(0.0, 1.0)
    with pytest.raises(ValueError):
        draw_level(1.5, 1.0)


def test_draw_level_tail_fraction_monte_carlo():
    # P(level >= 1) = P(-ln u * norm >= 1) = exp(-1/norm) = 1/16 for norm = 1/ln 16.
    norm = 1 / math.log(16)
    rng = np.random.default_rng(7)
    u = 1.0 - rng.random(1_000_000)
    levels = np.floor(-np.log(u) * norm)
    frac = float(np.mean(levels >= 1))
    assert abs(frac - 1 / 16) <= 0.01
    assert all(draw_level(float(x), norm) == int(y) for x, y in zip(u[:2000], levels[:2000]))


# -- insert / build -----------------------------------------------------------


def test_insert_into_empty_graph(kernel):
    g = HnswGraph(3, kernel=kernel)
    level = g.insert(42, [1.0, 2.0, 3.0])
    assert g.entry_vertex == 42
    assert g.max_layer == level
    for t in range(level + 1):
        assert g.neighbors(42, t) == []


def test_second_item_mutually_connected(kernel):
    g = HnswGraph(2, kernel=kernel, seed=3)
    g.insert(0, [0.0, 0.0])
    g.insert(1, [1.0, 1.0])
    shared = min(g.level_of(0), g.level_of(1))
    for t in range(shared + 1):
        assert g.neighbors(0, t) == [1]
        assert g.neighbors(1, t) == [0]


def test_duplicate_and_dimension_errors(kernel):
    g = HnswGraph(2, kernel=kernel)
    g.insert(0, [0.0, 0.0])
    with pytest.raises(DuplicateIdError):
        g.insert(0, [1.0, 1.0])
    with pytest.raises(DimensionError):
        g.insert(1, [1.0, 1.0, 1.0])


def test_build_errors():
    with pytest.raises(EmptyInputError):
        HnswGraph.build(np.empty((0, 4)))
    with pytest.raises(DimensionError):
        HnswGraph.build([[1.0, 2.0], [1.0, 2.0, 3.0]])


def test_build_single_item(kernel):
    g = HnswGraph.build(np.ones((1, 4)), seed=11, kernel=kernel)
    rng = np.random.Generator(np.random.PCG64(11))
    expected = draw_level(1.0 - rng.random(), 1 / math.log(16))
    assert len(g) == 1 and g.max_layer == expected
    assert g.violations() == []


def test_structure_after_10k_inserts(rng):
    items = rng.random((10_000, 8), dtype=np.float32)
    g = HnswGraph.build(items, seed=5)
    assert g.violations() == []
    n = len(g)
    levels = np.array([g.level_of(i) for i in range(n)])
    assert levels.max() == g.max_layer
    for t in range(1, g.max_layer + 1):
        upper = set(g.layer_vertices(t).tolist())
        lower = set(g.layer_vertices(t - 1).tolist())
        assert upper <= lower
        for v in upper:
            assert len(g.neighbors(v, t)) <= g.M
    assert set(g.layer_vertices(0).tolist()) == set(range(n))
    assert all(len(g.neighbors(v, 0)) <= g.M0 for v in range(n))


def test_build_is_deterministic(rng, kernel):
    items = rng.normal(size=(400, 6)).astype(np.float32)
    a = HnswGraph.build(items, M=6, M0=12, build_l=40, seed=9, kernel=kernel)
    b = HnswGraph.build(items, M=6, M0=12, build_l=40, seed=9, kernel=kernel)
    assert a.to_bytes() == b.to_bytes()
    c = HnswGraph.build(items, M=6, M0=12, build_l=40, seed=10, kernel=kernel)
    assert c.to_bytes() != a.to_bytes()


@pytest.mark.parametrize("metric", list(MetricKind))
def test_backends_build_identical_graphs(rng, metric):
    from conftest import available_kernels
    from metashard.hnsw import load_kernel

    if "cython" not in available_kernels():
        pytest.skip("compiled kernel not built")
    items = rng.normal(size=(500, 8)).astype(np.float32)
    if metric is MetricKind.ANGULAR:
        items /= np.linalg.norm(items, axis=1, keepdims=True)
    graphs = [HnswGraph.build(items, metric, M=6, M0=12, build_l=30, seed=4,
                              kernel=load_kernel(name)) for name in ("cython", "python")]
    assert graphs[0].to_bytes() == graphs[1].to_bytes()
    for q in rng.normal(size=(20, 8)).astype(np.float32):
        a, b = (g.search(q, 5, 30) for g in graphs)
        assert a.ids.tolist() == b.ids.tolist()
        np.testing.assert_allclose(a.scores, b.scores, rtol=1e-12)
        assert a.evaluations == b.evaluations


# -- search_level -------------------------------------------------------------


def test_search_level_single_vertex(kernel):
    g = HnswGraph(2, kernel=kernel)
    g.insert(7, [1.0, 1.0])
    hits = g.search_level(0, [0.0, 0.0], [7], 5)
    assert [i for i, _ in hits] == [7]


def test_search_level_complete_graph_is_exact(rng, kernel):
    items = rng.normal(size=(12, 4)).astype(np.float32)
    g = HnswGraph.build(items, M=16, M0=32, build_l=50, seed=1, kernel=kernel)
    adj = g.adjacency(0)
    assert all(set(nb) == set(range(12)) - {v} for v, nb in adj.items())
    q = rng.normal(size=4).astype(np.float32)
    for f in (1, 3, 5, 12):
        got = [i for i, _ in g.search_level(0, q, [g.entry_vertex], f)]
        assert got == brute_topk(items, q, f).tolist()


def test_search_level_starting_at_optimum(rng, kernel):
    items = rng.normal(size=(300, 5)).astype(np.float32)
    g = HnswGraph.build(items, M=6, M0=12, build_l=40, seed=2, kernel=kernel)
    q = items[17] + 0.001
    best = int(brute_topk(items, q, 1)[0])
    assert g.search_level(0, q, [best], 1)[0][0] == best


def test_search_level_greedy_stops_at_local_optimum(rng, kernel):
    items = rng.normal(size=(300, 5)).astype(np.float32)
    g = HnswGraph.build(items, M=6, M0=12, build_l=40, seed=2, kernel=kernel)
    q = rng.normal(size=5).astype(np.float32)
    (stop, s_stop), = g.search_level(0, q, [0], 1)
    for nb in g.neighbors(stop, 0):
        assert score(g.metric, q, items[nb]) <= s_stop


def test_search_level_invalid_entry(kernel):
    g = HnswGraph.build(np.eye(4, dtype=np.float32), seed=0, kernel=kernel)
    with pytest.raises(InvalidEntryError):
        g.search_level(0, np.zeros(4), [99], 1)
    with pytest.raises(InvalidEntryError):
        g.search_level(g.max_layer + 1, np.zeros(4), [g.entry_vertex], 1)


# -- search -------------------------------------------------------------------


def test_search_empty_graph():
    with pytest.raises(EmptyIndexError):
        HnswGraph(3).search(np.zeros(3))


def test_search_exactly_k_items(rng, kernel):
    items = rng.normal(size=(10, 6)).astype(np.float32)
    g = HnswGraph.build(items, seed=3, kernel=kernel)
    q = rng.normal(size=6).astype(np.float32)
    res = g.search(q, k=10, l=10)
    assert res.ids.tolist() == brute_topk(items, q, 10).tolist()


def test_search_identity_item_ranks_first(rng, kernel):
    items = rng.normal(size=(500, 6)).astype(np.float32)
    g = HnswGraph.build(items, M=8, M0=16, build_l=50, seed=3, kernel=kernel)
    res = g.search(items[123], k=5, l=20)
    assert res.ids[0] == 123 and res.scores[0] == 0.0


def test_search_recall_1k_uniform_16d(kernel):
    rng = np.random.default_rng(2024)
    items = rng.random((1000, 16), dtype=np.float32)
    queries = rng.random((100, 16), dtype=np.float32)
    g = HnswGraph.build(items, seed=1, kernel=kernel)
    assert recall(g, items, queries, k=10, l=100) >= 0.95


def test_build_10k_recall():
    rng = np.random.default_rng(77)
    items = rng.random((10_000, 16), dtype=np.float32)
    queries = rng.random((100, 16), dtype=np.float32)
    g = HnswGraph.build(items, seed=2)
    assert recall(g, items, queries, k=10, l=100) >= 0.9


def test_search_soundness_and_visit_bound(rng, kernel):
    items = rng.normal(size=(800, 8)).astype(np.float32)
    g = HnswGraph.build(items, M=8, M0=16, build_l=40, seed=6, kernel=kernel)
    for q in rng.normal(size=(30, 8)).astype(np.float32):
        res = g.search(q, k=10, l=60)
        assert len(set(res.ids.tolist())) == len(res.ids)
        assert all(i in g for i in res.ids.tolist())
        recomputed = [score(g.metric, q, items[i]) for i in res.ids]
        np.testing.assert_allclose(res.scores, recomputed, rtol=1e-12)
        assert list(res.scores) == sorted(res.scores, reverse=True)
        assert res.evaluations <= len(g)


def test_visit_bound_on_tiny_graphs(kernel):
    for seed in range(20):
        items = np.random.default_rng(seed).normal(size=(3, 2)).astype(np.float32)
        g = HnswGraph.build(items, M=2, M0=2, build_l=5, seed=seed, kernel=kernel)
        assert g.search(np.zeros(2), k=3, l=3).evaluations <= 3


def test_recall_monotone_in_beam_width():
    rng = np.random.default_rng(99)
    items = rng.random((5000, 24), dtype=np.float32)
    queries = rng.random((100, 24), dtype=np.float32)
    g = HnswGraph.build(items, M=8, M0=16, build_l=60, seed=8)
    r = [recall(g, items, queries, 10, l) for l in (10, 50, 100)]
    assert r[0] <= r[1] <= r[2]


def test_search_is_deterministic(rng):
    items = rng.normal(size=(600, 8)).astype(np.float32)
    g = HnswGraph.build(items, seed=1)
    q = rng.normal(size=8).astype(np.float32)
    first = g.search(q, 10, 50)
    for _ in range(3):
        again = g.search(q, 10, 50)
        assert again.pairs() == first.pairs() and again.evaluations == first.evaluations


@pytest.mark.parametrize("metric", [MetricKind.INNER_PRODUCT, MetricKind.ANGULAR])
def test_dot_product_metrics(rng, metric, kernel):
    items = rng.normal(size=(400, 8)).astype(np.float32)
    if metric is MetricKind.ANGULAR:
        items /= np.linalg.norm(items, axis=1, keepdims=True)
    g = HnswGraph.build(items, metric, M=8, M0=16, build_l=60, seed=1, kernel=kernel)
    queries = rng.normal(size=(30, 8)).astype(np.float32)
    if metric is MetricKind.ANGULAR:
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    assert recall(g, items, queries, 5, 80, metric) >= 0.9


# -- persistence --------------------------------------------------------------


def test_round_trip(tmp_path, rng, kernel):
    items = rng.normal(size=(300, 5)).astype(np.float32)
    g = HnswGraph.build(items, MetricKind.INNER_PRODUCT, M=6, M0=10, seed=4,
                        ids=range(1000, 1300), kernel=kernel)
    path = tmp_path / "g.idx"
    g.save(path)
    h = HnswGraph.load(path)
    assert h.to_bytes() == g.to_bytes()
    assert h.metric is MetricKind.INNER_PRODUCT and (h.M, h.M0) == (6, 10)
    q = rng.normal(size=5)
    assert h.search(q, 5).pairs() == g.search(q, 5).pairs()


def test_file_layout_header(rng):
    g = HnswGraph.build(rng.normal(size=(5, 3)).astype(np.float32), seed=1)
    raw = g.to_bytes()
    assert raw[:8] == MAGIC
    # items start right after the fixed header: id (i64) + 3 float32
    import struct

    from metashard.hnsw.graph import _HEADER
    off = _HEADER.size
    first_id, = struct.unpack_from("<q", raw, off)
    vals = struct.unpack_from("<3f", raw, off + 8)
    assert first_id == 0 and np.allclose(vals, g.vector(0))


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "degree", "trailing"])
def test_load_rejects_corruption(rng, mutate):
    g = HnswGraph.build(rng.normal(size=(50, 3)).astype(np.float32), M=4, M0=4, seed=1)
    raw = bytearray(g.to_bytes())
    if mutate == "magic":
        raw[0:8] = b"NOTMAGIC"
    elif mutate == "version":
        raw[8] = 99
    elif mutate == "truncate":
        raw = raw[:-5]
    elif mutate == "degree":
        # Shrink the declared M0 so the stored layer-0 lists violate the cap.
        from metashard.hnsw.graph import _HEADER
        fields = list(_HEADER.unpack_from(raw, 0))
        fields[6] = 2
        raw[: _HEADER.size] = _HEADER.pack(*fields)
    elif mutate == "trailing":
        raw += b"\x00"
    with pytest.raises(IndexFormatError):
        HnswGraph.from_bytes(bytes(raw))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 120), st.integers(0, 10_000), st.integers(2, 8))
def test_invariants_hold_for_random_builds(n, seed, M):
    items = np.random.default_rng(seed).normal(size=(n, 3)).astype(np.float32)
    g = HnswGraph.build(items, M=M, M0=2 * M, build_l=20, seed=seed)
    assert g.violations() == []
    res = g.search(items[0], k=min(5, n), l=20)
    assert 1 <= len(res) <= min(5, n)
    assert all(i in g for i in res.ids.tolist())
    assert list(res.scores) == sorted(res.scores, reverse=True)


@pytest.mark.parametrize("budget", [1, 25, 100, 400])
def test_evaluation_budget_caps_work(rng, kernel, budget):
    items = rng.normal(size=(3000, 8)).astype(np.float32)
    g = HnswGraph.build(items, M=8, M0=16, build_l=40, seed=2, kernel=kernel)
    for q in rng.normal(size=(10, 8)).astype(np.float32):
        free = g.search(q, k=10, l=200)
        capped = g.search(q, k=10, l=200, max_evals=budget)
        # the check runs between expansions, so one layer-0 expansion may overshoot
        assert capped.evaluations <= max(budget, 1) + g.M0
        assert capped.evaluations <= free.evaluations
        assert len(capped.ids) <= 10


def test_evaluation_budget_same_on_both_backends(rng):
    from conftest import available_kernels
    from metashard.hnsw import load_kernel

    if "cython" not in available_kernels():
        pytest.skip("compiled kernel not built")
    items = rng.normal(size=(2000, 8)).astype(np.float32)
    graphs = [HnswGraph.build(items, M=8, M0=16, build_l=40, seed=4, kernel=load_kernel(name))
              for name in ("cython", "python")]
    for q in rng.normal(size=(10, 8)).astype(np.float32):
        a, b = (g.search(q, k=10, l=100, max_evals=150) for g in graphs)
        assert a.ids.tolist() == b.ids.tolist() and a.evaluations == b.evaluations
