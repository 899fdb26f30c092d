"""Benchmark tooling: datasets, ground truth, metrics and the replay harness."""
from metashard.bench.groundtruth import GroundTruth, ground_truth
from metashard.bench.harness import access_rate, naive_matching_precision, run_benchmark
from metashard.bench.io import read_vectors, write_vectors
from metashard.bench.metrics import BenchReport, percentile, precision, reports_to_csv
from metashard.bench.normbias import NormBiasReport, mips_norm_bias_report

__all__ = [
    "BenchReport", "GroundTruth", "NormBiasReport", "access_rate", "ground_truth",
    "mips_norm_bias_report", "naive_matching_precision", "percentile", "precision",
    "read_vectors", "reports_to_csv", "run_benchmark", "write_vectors",
]
