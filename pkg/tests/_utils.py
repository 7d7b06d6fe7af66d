"""Shared builders for the distributed test problems."""

from dataclasses import dataclass

import numpy as np

from bcsrmv.bcsr import BlockCsrMatrix
from bcsrmv.bench.problem import hashed_values
from bcsrmv.blocks import BlockSparsityPattern
from bcsrmv.comm import run_ranks
from bcsrmv.localization import (
    LocalizationLayout,
    build_support_sparsity,
    column_supports,
    grow_sparsity_for_operator,
    order_and_block_columns,
)
from bcsrmv.matfree import CellOperator, make_dof_layout
from bcsrmv.mesh import build_mesh, enumerate_dofs, partition_and_order_cells


@dataclass
class Setup:
    mesh: object
    partition: object
    numbering: object
    layout: LocalizationLayout
    pattern: BlockSparsityPattern
    grown: BlockSparsityPattern
    supports: list
    seed: int
    n_ranks: int


def build_setup(
    extents,
    spacing,
    level,
    degree,
    centers,
    radius,
    block_size=3,
    vectors=2,
    n_ranks=1,
    seed=0,
    origin=(0.0, 0.0, 0.0),
):
    mesh = build_mesh(extents, spacing, level, origin)
    partition = partition_and_order_cells(mesh, n_ranks)
    numbering = enumerate_dofs(mesh, partition, degree)
    layout = order_and_block_columns(
        mesh, partition, centers, radius, vectors_per_center=vectors, block_size=block_size
    )
    supports = column_supports(mesh, numbering, layout)
    pattern = build_support_sparsity(mesh, partition, numbering, layout, supports)
    grown = grow_sparsity_for_operator(pattern, mesh, numbering)
    return Setup(
        mesh, partition, numbering, layout, pattern, grown, supports, seed, n_ranks
    )


def fill_phi(matrix: BlockCsrMatrix, s: Setup, seed=None):
    seed = s.seed if seed is None else seed
    old_of_new = s.layout.old_col_of_new
    v = s.layout.vectors_per_center

    def values(rows, cols):
        old = old_of_new[cols]
        vals = hashed_values(seed, rows, old)
        for j, oc in enumerate(old):
            inside = np.isin(rows, s.supports[oc // v], assume_unique=True)
            vals[~inside, j] = 0.0
        return vals

    matrix.fill_owned(values)


def phi_dense(s: Setup, seed=None) -> np.ndarray:
    """Dense multivector in storage (new) column order."""
    seed = s.seed if seed is None else seed
    lay = s.layout
    n = s.numbering.n_dofs
    vals = hashed_values(seed, np.arange(n), lay.old_col_of_new)
    mask = np.zeros((n, lay.n_columns), dtype=bool)
    for new_col in range(lay.n_columns):
        center = int(lay.old_col_of_new[new_col]) // lay.vectors_per_center
        mask[s.supports[center], new_col] = True
    return np.where(mask, vals, 0.0)


def to_original_columns(dense: np.ndarray, layout: LocalizationLayout) -> np.ndarray:
    out = np.zeros_like(dense)
    out[:, layout.old_col_of_new] = dense
    return out


def run_operator_dense(s: Setup, spec, variant) -> np.ndarray:
    """Apply the operator on s.n_ranks ranks; dense result, original columns."""

    def program(ctx):
        rl = make_dof_layout(ctx, s.mesh, s.partition, s.numbering)
        op = CellOperator(s.mesh, s.partition, s.numbering, rl)
        phi = BlockCsrMatrix(s.pattern, rl, ctx, 8)
        fill_phi(phi, s)
        dst = BlockCsrMatrix(s.grown, rl, ctx, 8)
        op.apply(spec, phi, dst, variant=variant)
        return dst.to_dense_owned()

    parts = run_ranks(s.n_ranks, program)
    return to_original_columns(np.sum(parts, axis=0), s.layout)
