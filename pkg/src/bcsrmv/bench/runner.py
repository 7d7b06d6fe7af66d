"""Benchmark runner: kernel timings, flop counters, structural statistics."""

from __future__ import annotations

import csv
import hashlib
import json
import time

import numpy as np

from ..bcsr import BlockCsrMatrix, mmult, tmmult, tr_tmmult
from ..comm import run_ranks
from ..counters import OpCounters
from ..energy import compute_energy, compute_gradient, make_workspace
from ..errors import Error
from ..localization import max_patch_overlap, stored_rows_per_column
from ..matfree import (
    GEMM,
    CellOperator,
    RowsBlockAccessor,
    hamiltonian_operator,
    make_dof_layout,
    mass_operator,
)
from .config import BenchConfig
from .problem import Problem, fill_multivector, generate_problem


class _RankSetup:
    """Per-rank matrices and operators for one generated problem."""

    def __init__(self, ctx, prob: Problem):
        cfg = prob.cfg
        self.ctx = ctx
        self.prob = prob
        self.row_layout = make_dof_layout(ctx, prob.mesh, prob.partition, prob.numbering)
        self.op = CellOperator(prob.mesh, prob.partition, prob.numbering, self.row_layout)
        self.phi = BlockCsrMatrix(prob.pattern, self.row_layout, ctx, cfg.lane_width)
        fill_multivector(self.phi, prob.loc_layout, cfg.seed, prob.supports)
        self.ws = make_workspace(ctx, self.op, self.phi, prob.loc_layout)
        self.spec_m = mass_operator()
        self.spec_h = hamiltonian_operator(cfg.potential)

    def kernels(self) -> dict:
        s = self
        return {
            "apply_m": lambda c=None: s.op.apply(s.spec_m, s.phi, s.ws.phi_m, counters=c),
            "apply_h": lambda c=None: s.op.apply(s.spec_h, s.phi, s.ws.phi_h, counters=c),
            "apply_h_gemm": lambda c=None: s.op.apply(
                s.spec_h, s.phi, s.ws.phi_h, variant=GEMM, counters=c
            ),
            "mmult": lambda c=None: mmult(
                s.ws.phi_m, s.ws.hbar, s.ws.g, alpha=-2.0, counters=c
            ),
            "tmmult": lambda c=None: tmmult(s.phi, s.ws.phi_m, s.ws.mbar, counters=c),
            "tr_tmmult": lambda c=None: tr_tmmult(s.phi, s.ws.phi_m, counters=c),
            "energy": lambda c=None: compute_energy(
                s.op, s.spec_m, s.spec_h, s.phi, s.ws, counters=c
            ),
            "gradient": lambda c=None: compute_gradient(s.ws, counters=c),
        }

    def kernel_bytes_estimate(self, name: str, counters: OpCounters) -> int:
        nb = lambda m: m.data.nbytes
        ws = self.ws
        if name.startswith("apply"):
            return counters.bytes_moved
        if name == "mmult":
            return nb(ws.phi_m) + nb(ws.hbar) + 2 * nb(ws.g)
        if name == "tmmult":
            return nb(self.phi) + nb(ws.phi_m) + 2 * nb(ws.mbar)
        if name == "tr_tmmult":
            return nb(self.phi) + nb(ws.phi_m)
        if name == "energy":
            return counters.bytes_moved + 2 * (
                nb(self.phi) + nb(ws.phi_m) + nb(ws.phi_h)
            ) + nb(ws.mbar) + nb(ws.hbar)
        if name == "gradient":
            return nb(ws.phi_m) + nb(ws.phi_h) + nb(ws.hbar) + nb(ws.t2) + 2 * nb(ws.g)
        return 0


def count_cell_column_blocks(setup: _RankSetup) -> int:
    """Non-empty column blocks visited by the cell loop on this rank."""
    acc = RowsBlockAccessor(setup.phi, setup.op.cell_map)
    total = 0
    for ci in range(len(setup.op.cells)):
        total += len(acc.emitted_columns(ci))
    return total


def _digest(m: BlockCsrMatrix) -> str:
    return hashlib.sha256(m.data.tobytes()).hexdigest()[:16]


def _bench_program(ctx, prob: Problem, kernels, reps):
    setup = _RankSetup(ctx, prob)
    table = setup.kernels()
    # one energy pass fills the workspace so every kernel has valid inputs
    table["energy"](None)
    out = {"kernels": {}, "rank": ctx.rank}
    for name in kernels:
        fn = table[name]
        counters = OpCounters()
        ctx.barrier()
        fn(counters)  # warm-up, with counting
        times = []
        for _ in range(reps):
            ctx.barrier()
            t0 = time.perf_counter()
            fn(None)
            ctx.barrier()
            times.append(time.perf_counter() - t0)
        out["kernels"][name] = {
            "times": times,
            "flops": counters.flops,
            "col_blocks_visited": counters.col_blocks_visited,
            "bytes_est": setup.kernel_bytes_estimate(name, counters),
        }
    out["col_blocks_cell_op"] = count_cell_column_blocks(setup)
    out["digests"] = {
        "phi": _digest(setup.phi),
        "phi_m": _digest(setup.ws.phi_m),
        "phi_h": _digest(setup.ws.phi_h),
        "mbar": _digest(setup.ws.mbar),
        "hbar": _digest(setup.ws.hbar),
        "g": _digest(setup.ws.g),
    }
    out["energy"] = setup.ws.energy
    return out


def _stats_program(ctx, prob: Problem):
    setup = _RankSetup(ctx, prob)
    return {
        "col_blocks_cell_op": count_cell_column_blocks(setup),
        "n_ghost_rows": int(setup.row_layout.ghost_rows_flat.size),
        "owned_proj_blocks": int(
            prob.loc_layout.rank_block_start[ctx.rank + 1]
            - prob.loc_layout.rank_block_start[ctx.rank]
        ),
    }


def _mean_std(values) -> dict:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {"mean": 0.0, "std": 0.0}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def structural_stats(prob: Problem, per_rank: list[dict] | None = None) -> dict:
    """Structure block of the report: sizes, blockings, overlap, imbalance."""
    cfg = prob.cfg
    p = cfg.degree
    stats = {
        "dofs_per_cell": (p + 1) ** 3,
        "n_cells": prob.mesh.n_cells,
        "n_dofs": prob.numbering.n_dofs,
        "n_columns": prob.loc_layout.n_columns,
        "n_row_blocks": prob.numbering.row_blocks.n_blocks,
        "n_col_blocks": prob.loc_layout.column_blocks.n_blocks,
        "row_blocks_size": _mean_std(prob.numbering.row_blocks.sizes),
        "col_blocks_size": _mean_std(prob.loc_layout.column_blocks.sizes),
        "max_patch_overlap": max_patch_overlap(prob.mesh, prob.loc_layout),
        "stored_values_per_column": _mean_std(stored_rows_per_column(prob.pattern)),
        "extents": list(prob.mesh.extents),
        "node_grid": list(prob.mesh.node_grid_shape(p)),
    }
    if per_rank:
        stats["col_blocks_cell_op_per_rank"] = _mean_std(
            [r["col_blocks_cell_op"] for r in per_rank]
        )
        if "owned_proj_blocks" in per_rank[0]:
            stats["owned_proj_blocks_per_rank"] = _mean_std(
                [r["owned_proj_blocks"] for r in per_rank]
            )
    return stats


def run_benchmark(cfg: BenchConfig, trace_path=None) -> dict:
    """Execute the configured kernels and assemble the report."""
    cfg.validate()
    prob = generate_problem(cfg)
    report = {
        "config": cfg.to_dict(),
        "valid": True,
        "kernels": {},
    }
    try:
        per_rank = run_ranks(
            cfg.n_ranks, _bench_program, prob, cfg.kernels, cfg.reps,
            trace_path=trace_path,
        )
    except Error as exc:
        report["valid"] = False
        report["error"] = str(exc)
        report["structure"] = structural_stats(prob)
        return report
    report["structure"] = structural_stats(prob, per_rank)
    report["energy"] = per_rank[0]["energy"]
    report["digests"] = [r["digests"] for r in per_rank]
    for name in cfg.kernels:
        times = np.max(
            [r["kernels"][name]["times"] for r in per_rank], axis=0
        )  # collective wall time per rep
        flops = int(sum(r["kernels"][name]["flops"] for r in per_rank))
        report["kernels"][name] = {
            "seconds": [float(t) for t in times],
            "min": float(times.min()),
            "mean": float(times.mean()),
            "max": float(times.max()),
            "flops": flops,
            "bytes_est": int(sum(r["kernels"][name]["bytes_est"] for r in per_rank)),
            "col_blocks_per_rank": [
                r["kernels"][name]["col_blocks_visited"] for r in per_rank
            ],
        }
    return report


def collect_stats(cfg: BenchConfig) -> dict:
    """Structure-only report (no kernel timings)."""
    cfg.validate()
    prob = generate_problem(cfg)
    per_rank = run_ranks(cfg.n_ranks, _stats_program, prob)
    return {
        "config": cfg.to_dict(),
        "structure": structural_stats(prob, per_rank),
    }


def write_report_json(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def write_timings_csv(report: dict, path):
    """Fixed schema: kernel,rep,rank_count,seconds,flops,bytes_est."""
    n_ranks = report["config"]["n_ranks"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "rep", "rank_count", "seconds", "flops", "bytes_est"])
        for name, data in report["kernels"].items():
            for rep, sec in enumerate(data["seconds"]):
                writer.writerow(
                    [name, rep, n_ranks, f"{sec:.9f}", data["flops"], data["bytes_est"]]
                )
