import numpy as np
import pytest

from metashard.hnsw import load_kernel
from metashard.metric import MetricKind, score_many


def brute_topk(items: np.ndarray, q, k: int, metric=MetricKind.EUCLIDEAN_NEG) -> np.ndarray:
    """Exact top-k row indices; ties by lower index."""
    s = score_many(metric, q, items)
    return np.lexsort((np.arange(len(items)), -s))[:k]


def available_kernels():
    names = ["python"]
    try:
        load_kernel("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


@pytest.fixture(params=available_kernels())
def kernel(request):
    return load_kernel(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance(n, title)`` are rolled up into one
# PASS/FAIL line per criterion at the end of the run. ``measured`` attaches
# the observed numbers to that line.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


def _entry(item):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return None
    n, title = mark.args
    return _criteria.setdefault(n, {"title": title, "status": "PASS", "ran": False, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.failed:
        entry["status"] = "FAIL"
    elif rep.skipped and not entry["ran"]:
        entry["status"] = "SKIP"
    if rep.when == "call" and rep.passed:
        entry["ran"] = True
        if entry["status"] == "SKIP":
            entry["status"] = "PASS"


@pytest.fixture
def measured(request):
    entry = _entry(request.node)

    def note(text: str) -> None:
        if entry is not None:
            entry["notes"].append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {e['status']:4}  {e['title']}{notes}")
