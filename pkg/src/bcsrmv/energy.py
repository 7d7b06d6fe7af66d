"""Orbital-minimization functional kernels: energy, gradient, line-search slope.

The energy of a multivector is tr((2*I - Mbar) Hbar) with Mbar, Hbar the
projections of the mass and Hamiltonian operators onto the span of the
columns.  Everything here is rank-collective: every rank must enter each
call, and scalars come back identical on all ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .bcsr import (
    BlockCsrMatrix,
    RankLayout,
    add_scaled_identity,
    build_rank_layout,
    copy_pattern_subset,
    mmult,
    scale_add,
    tmmult,
    tr_mult,
    tr_tmmult,
)
from .blocks import BlockIndices, BlockSparsityPattern
from .counters import OpCounters
from .localization import LocalizationLayout, grow_sparsity_for_operator
from .matfree import SUMFAC, CellOperator, OperatorSpec


def projected_pattern(
    phi_pattern: BlockSparsityPattern,
    grown_pattern: BlockSparsityPattern,
) -> BlockSparsityPattern:
    """Symmetric block pattern of phi^T (A phi): covers the product and
    its transpose, diagonal always included."""
    s = phi_pattern.to_bool_csr()
    g = grown_pattern.to_bool_csr()
    prod = (s.T @ g).tocsr()
    m = prod.shape[0]
    sym = prod + prod.T + sparse.identity(m, dtype=bool, format="csr")
    cols = phi_pattern.col_blocks
    return BlockSparsityPattern.from_bool_csr(sym, cols, cols)


def column_space_ghost_blocks(
    grown_pattern: BlockSparsityPattern,
    proj_pattern: BlockSparsityPattern,
    row_layout: RankLayout,
    col_rank_block_start,
    rank: int,
) -> np.ndarray:
    """Column blocks a rank must ghost for projected-matrix products.

    Complete block rows are replicated: every column block seen in the
    rank's owned multivector rows plus every column of its owned projected
    rows.
    """
    needed = set()
    for gb in range(row_layout.first_block, row_layout.first_block + row_layout.n_owned_blocks):
        needed.update(int(c) for c in grown_pattern.row_cols(gb))
    lo = int(col_rank_block_start[rank])
    hi = int(col_rank_block_start[rank + 1])
    for k in range(lo, hi):
        needed.update(int(c) for c in proj_pattern.row_cols(k))
    owned = set(range(lo, hi))
    return np.asarray(sorted(needed - owned), dtype=np.int64)


def make_column_layout(
    ctx,
    col_blocks: BlockIndices,
    col_rank_block_start,
    ghost_blocks,
) -> RankLayout:
    """1D row-wise layout of projected matrices over the column blocking."""
    ghost_rows = (
        np.concatenate(
            [
                np.arange(col_blocks.starts[b], col_blocks.starts[b + 1])
                for b in ghost_blocks
            ]
        )
        if len(ghost_blocks)
        else np.zeros(0, dtype=np.int64)
    )
    return build_rank_layout(ctx, col_blocks, col_rank_block_start, ghost_rows)


@dataclass
class EnergyWorkspace:
    phi_m: BlockCsrMatrix  # M @ phi on the grown pattern
    phi_h: BlockCsrMatrix  # H @ phi on the grown pattern
    mbar: BlockCsrMatrix  # phi^T M phi over column blocks
    hbar: BlockCsrMatrix  # phi^T H phi over column blocks
    t2: BlockCsrMatrix  # scratch holding 2*I - mbar
    g: BlockCsrMatrix  # gradient, grown pattern
    energy: float | None = None


def make_workspace(
    ctx,
    op: CellOperator,
    phi: BlockCsrMatrix,
    loc_layout: LocalizationLayout,
) -> EnergyWorkspace:
    grown = grow_sparsity_for_operator(phi.pattern, op.mesh, op.numbering)
    proj = projected_pattern(phi.pattern, grown)
    ghost_blocks = column_space_ghost_blocks(
        grown, proj, phi.layout, loc_layout.rank_block_start, ctx.rank
    )
    col_layout = make_column_layout(
        ctx, loc_layout.column_blocks, loc_layout.rank_block_start, ghost_blocks
    )
    w = phi.lane_width
    return EnergyWorkspace(
        phi_m=BlockCsrMatrix(grown, phi.layout, ctx, w),
        phi_h=BlockCsrMatrix(grown, phi.layout, ctx, w),
        mbar=BlockCsrMatrix(proj, col_layout, ctx, w),
        hbar=BlockCsrMatrix(proj, col_layout, ctx, w),
        t2=BlockCsrMatrix(proj, col_layout, ctx, w),
        g=BlockCsrMatrix(grown, phi.layout, ctx, w),
    )


def compute_energy(
    op: CellOperator,
    spec_m: OperatorSpec,
    spec_h: OperatorSpec,
    phi: BlockCsrMatrix,
    ws: EnergyWorkspace,
    variant: str = SUMFAC,
    counters: OpCounters | None = None,
) -> float:
    """E(phi) from the composed operator/product pipeline.

    Side effects: ws.phi_m, ws.phi_h hold the operator images; ws.mbar and
    ws.hbar the projections; ws.t2 holds 2*I - mbar; hbar and t2 finish in
    the ghosted state so the gradient products can run right away.
    """
    op.apply(spec_m, phi, ws.phi_m, variant=variant, counters=counters)
    op.apply(spec_h, phi, ws.phi_h, variant=variant, counters=counters)
    tmmult(phi, ws.phi_m, ws.mbar, counters=counters)
    tmmult(phi, ws.phi_h, ws.hbar, counters=counters)
    ws.t2.ensure_owned()
    copy_pattern_subset(ws.t2, ws.mbar)
    scale_add(ws.t2, -1.0)
    add_scaled_identity(ws.t2, 2.0)
    ws.hbar.update_ghost_values()
    energy = tr_mult(ws.t2, ws.hbar, counters=counters)
    ws.t2.update_ghost_values()
    ws.energy = energy
    return energy


def compute_gradient(
    ws: EnergyWorkspace, counters: OpCounters | None = None
) -> BlockCsrMatrix:
    """G = -2 phi_m hbar + 2 phi_h (2I - mbar), truncated to G's pattern."""
    if ws.energy is None:
        raise ValueError("compute_energy must run before compute_gradient")
    mmult(ws.phi_m, ws.hbar, ws.g, alpha=-2.0, counters=counters)
    mmult(ws.phi_h, ws.t2, ws.g, alpha=2.0, accumulate=True, counters=counters)
    return ws.g


def directional_derivative(
    d: BlockCsrMatrix, g: BlockCsrMatrix, counters: OpCounters | None = None
) -> float:
    """Slope tr(D^T G) used by line searches."""
    return tr_tmmult(d, g, counters=counters)
