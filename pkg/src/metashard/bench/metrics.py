"""Precision and the benchmark report record."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np


def precision(result_ids, truth_ids, k: int) -> float:
    """Fraction of the top-``k`` ground truth present among ``result_ids``."""
    truth = list(truth_ids)[:k]
    if len(truth) < k:
        raise ValueError(f"ground truth holds {len(truth)} ids, fewer than k={k}")
    got = {int(i) for i in list(result_ids)[:k]}
    return len(got.intersection(int(t) for t in truth)) / k


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile, so the value is an observed sample."""
    arr = np.sort(np.asarray(samples, dtype=np.float64))
    if len(arr) == 0:
        return float("nan")
    rank = int(np.ceil(p / 100.0 * len(arr)))
    return float(arr[min(max(rank, 1), len(arr)) - 1])


@dataclass
class BenchReport:
    precision_mean: float
    access_rate_mean: float
    throughput: float
    latency_p50: float
    latency_p90: float
    distance_computations_per_query: float
    queries: int
    failed: int = 0
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        cfg = d.pop("config")
        d.update({f"config.{k}": v for k, v in sorted(cfg.items())})
        return d

    def to_lines(self) -> str:
        """Line-oriented ``key=value`` rendering."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def reports_to_csv(reports, extra_columns=None) -> str:
    """Comma-separated table with a header row, one row per report."""
    rows = []
    for i, r in enumerate(reports):
        row = r.as_dict()
        if extra_columns:
            row = {**extra_columns[i], **row}
        rows.append(row)
    header = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()
