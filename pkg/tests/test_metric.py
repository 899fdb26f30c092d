import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metashard.errors import DimensionError, ZeroNormError
from metashard.metric import MetricKind, normalize, normalize_rows, score, score_many

finite = st.floats(-100, 100, allow_nan=False, width=32)


def vec_pair(dim=st.integers(1, 12)):
    return dim.flatmap(
        lambda d: st.tuples(arrays(np.float32, d, elements=finite),
                            arrays(np.float32, d, elements=finite))
    )


def test_euclidean_identity_is_zero():
    x = np.array([1.5, -2.0, 3.25], dtype=np.float32)
    assert score(MetricKind.EUCLIDEAN_NEG, x, x) == 0.0


def test_inner_product_arithmetic():
    assert score(MetricKind.INNER_PRODUCT, [1, 2], [3, 4]) == 11.0


def test_angular_orthogonal():
    assert score(MetricKind.ANGULAR, [1, 0], [0, 1]) == 0.0


def test_euclidean_value():
    assert score(MetricKind.EUCLIDEAN_NEG, [0, 0], [3, 4]) == -5.0


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        score(MetricKind.INNER_PRODUCT, [1, 2], [1, 2, 3])


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3, 4]), [0.6, 0.8], atol=1e-7)
    u = normalize([0.2, -0.7, 1.1])
    np.testing.assert_allclose(normalize(u), u, atol=1e-6)
    with pytest.raises(ZeroNormError):
        normalize([0, 0])


def test_normalize_rows_rejects_zero_row():
    with pytest.raises(ZeroNormError):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


@pytest.mark.parametrize("name,kind", [
    ("euclidean", MetricKind.EUCLIDEAN_NEG), ("l2", MetricKind.EUCLIDEAN_NEG),
    ("angular", MetricKind.ANGULAR), ("inner-product", MetricKind.INNER_PRODUCT),
    ("ip", MetricKind.INNER_PRODUCT),
])
def test_parse(name, kind):
    assert MetricKind.parse(name) is kind


@given(arrays(np.float32, st.integers(1, 16), elements=finite))
def test_normalized_norm_is_one(x):
    if not np.any(x):
        return
    assert abs(np.linalg.norm(normalize(x).astype(np.float64)) - 1.0) < 1e-6


@given(vec_pair(), st.sampled_from(list(MetricKind)))
def test_symmetry(pair, metric):
    q, x = pair
    assert score(metric, q, x) == pytest.approx(score(metric, x, q), rel=1e-12, abs=1e-9)


@given(vec_pair())
def test_euclidean_nonpositive_and_zero_iff_equal(pair):
    q, x = pair
    s = score(MetricKind.EUCLIDEAN_NEG, q, x)
    assert s <= 0.0
    assert (s == 0.0) == bool(np.array_equal(q, x))


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(2, 40))
def test_angular_argmax_matches_euclidean_after_normalizing(seed, dim, n):
    rng = np.random.default_rng(seed)
    items = normalize_rows(rng.normal(size=(n, dim)))
    q = normalize(rng.normal(size=dim))
    ang = score_many(MetricKind.ANGULAR, q, items)
    euc = score_many(MetricKind.EUCLIDEAN_NEG, q, items)
    # Unit vectors: ||q-x||^2 = 2 - 2 q.x, so the orders agree up to rounding.
    best = int(np.argmax(ang))
    assert euc[best] >= euc.max() - 1e-6
    assert math.isclose(-euc[best], math.sqrt(max(2 - 2 * ang[best], 0)), abs_tol=1e-5)


def test_score_many_matches_score(rng):
    items = rng.normal(size=(20, 7)).astype(np.float32)
    q = rng.normal(size=7).astype(np.float32)
    for metric in MetricKind:
        many = score_many(metric, q, items)
        single = [score(metric, q, x) for x in items]
        np.testing.assert_allclose(many, single, rtol=1e-12)
