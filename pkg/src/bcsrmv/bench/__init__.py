"""Benchmark CLI: problem generator, kernel runner and verification suite."""

from .config import ALL_KERNELS, BenchConfig
from .problem import Problem, atom_centers, fill_multivector, generate_problem, hashed_values
from .runner import collect_stats, run_benchmark, structural_stats, write_timings_csv
from .verify import verify

__all__ = [
    "ALL_KERNELS",
    "BenchConfig",
    "Problem",
    "atom_centers",
    "fill_multivector",
    "generate_problem",
    "hashed_values",
    "collect_stats",
    "run_benchmark",
    "structural_stats",
    "write_timings_csv",
    "verify",
]
