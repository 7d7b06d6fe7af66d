"""Localization patches, column ordering/blocking and multivector sparsity.

Each localization center owns a patch: the fine children of every coarse
cell whose center lies within `radius` of it (the containing coarse cell
always qualifies, so a zero radius degenerates to a single patch cell).
Columns are sorted by (owner rank, Hilbert key of the center, center id)
and blocked per rank in groups of B with the remainder merged into the
last block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import ceil, log2

import numpy as np
from scipy import sparse

from .blocks import BlockIndices, BlockSparsityPattern
from .errors import ConfigurationError, DomainError
from .hilbert import hilbert_index, quantize
from .mesh import CellPartition, DofNumbering, StructuredMesh, cells_nodes


def assign_centers(mesh: StructuredMesh, partition: CellPartition, centers):
    """Owner rank and containing fine cell for every center.

    Centers exactly on a boundary between cells of different ranks are
    claimed by the lower rank (lowest cell id on further ties).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    owners = np.empty(centers.shape[0], dtype=np.int64)
    cells = np.empty(centers.shape[0], dtype=np.int64)
    for i, c in enumerate(centers):
        cand = mesh.boundary_candidate_cells(c)
        ranks = partition.rank_of_cell[cand]
        best = np.lexsort((cand, ranks))[0]
        owners[i] = ranks[best]
        cells[i] = cand[best]
    return owners, cells


def _center_keys(mesh: StructuredMesh, centers) -> list:
    levels = max(1, ceil(log2(max(mesh.extents))))
    lo, hi = mesh.box
    lattice = quantize(centers, lo, hi, levels)
    return [hilbert_index(tuple(q), levels) for q in lattice]


def block_columns_per_rank(counts_per_rank, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Block sizes and owning rank per block for per-rank column counts.

    Within a rank, full blocks of `block_size` are formed and the remainder
    is merged into the rank's last block; fewer than `block_size` columns
    form a single block.
    """
    if block_size < 1:
        raise ConfigurationError("block size must be >= 1")
    sizes = []
    ranks = []
    for rank, m in enumerate(counts_per_rank):
        m = int(m)
        if m == 0:
            continue
        n_full, rem = divmod(m, block_size)
        if n_full == 0:
            rank_sizes = [m]
        elif rem:
            rank_sizes = [block_size] * (n_full - 1) + [block_size + rem]
        else:
            rank_sizes = [block_size] * n_full
        sizes.extend(rank_sizes)
        ranks.extend([rank] * len(rank_sizes))
    return np.asarray(sizes, dtype=np.int64), np.asarray(ranks, dtype=np.int64)


@dataclass(frozen=True)
class LocalizationLayout:
    centers: np.ndarray
    radius: float
    vectors_per_center: int
    block_size: int
    owner_rank_of_center: np.ndarray
    containing_cell: np.ndarray
    old_col_of_new: np.ndarray  # column permutation, storage order -> original
    new_col_of_old: np.ndarray
    column_blocks: BlockIndices
    column_block_rank: np.ndarray
    rank_block_start: np.ndarray  # (n_ranks + 1,) column-block boundaries

    @property
    def n_columns(self) -> int:
        return self.centers.shape[0] * self.vectors_per_center

    def center_of_new_col(self, new_col: int) -> int:
        return int(self.old_col_of_new[new_col]) // self.vectors_per_center

    def to_json(self) -> str:
        return json.dumps(
            {
                "centers": self.centers.tolist(),
                "radius": self.radius,
                "block_size": self.block_size,
                "vectors_per_center": self.vectors_per_center,
            }
        )


def layout_from_json(text: str) -> dict:
    """Decode the serialized layout inputs (centers, radius, B, vectors)."""
    doc = json.loads(text)
    return {
        "centers": np.asarray(doc["centers"], dtype=float),
        "radius": float(doc["radius"]),
        "block_size": int(doc["block_size"]),
        "vectors_per_center": int(doc["vectors_per_center"]),
    }


def order_and_block_columns(
    mesh: StructuredMesh,
    partition: CellPartition,
    centers,
    radius: float,
    vectors_per_center: int = 2,
    block_size: int = 8,
) -> LocalizationLayout:
    """Column renumbering and blocking from the center locations."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if vectors_per_center < 1:
        raise ConfigurationError("vectors_per_center must be >= 1")
    owners, cells = assign_centers(mesh, partition, centers)
    keys = _center_keys(mesh, centers)
    n_centers = centers.shape[0]
    center_order = sorted(range(n_centers), key=lambda i: (owners[i], keys[i], i))

    v = vectors_per_center
    old_col_of_new = np.asarray(
        [c * v + j for c in center_order for j in range(v)], dtype=np.int64
    )
    new_col_of_old = np.empty_like(old_col_of_new)
    new_col_of_old[old_col_of_new] = np.arange(old_col_of_new.size)

    counts = np.bincount(owners, minlength=partition.n_ranks) * v
    sizes, block_rank = block_columns_per_rank(counts, block_size)
    blocks = BlockIndices(sizes)
    rank_block_start = np.searchsorted(
        block_rank, np.arange(partition.n_ranks + 1), side="left"
    ).astype(np.int64)
    return LocalizationLayout(
        centers,
        float(radius),
        v,
        int(block_size),
        owners,
        cells,
        old_col_of_new,
        new_col_of_old,
        blocks,
        block_rank,
        rank_block_start,
    )


def patch_coarse_cells(mesh: StructuredMesh, layout: LocalizationLayout, center_idx: int) -> np.ndarray:
    """Coarse cells of one patch: center within radius, plus the container."""
    cc = mesh.coarse_centers()
    d = np.linalg.norm(cc - layout.centers[center_idx], axis=1)
    qual = np.flatnonzero(d <= layout.radius)
    fine = int(layout.containing_cell[center_idx])
    s = 1 << mesh.coarse_level
    i, j, k = mesh.cell_ijk(fine)
    cx, cy, _ = mesh.coarse_extents
    container = (i // s) + cx * ((j // s) + cy * (k // s))
    return np.union1d(qual, [container])


def patch_fine_cells(mesh: StructuredMesh, layout: LocalizationLayout, center_idx: int) -> np.ndarray:
    coarse = patch_coarse_cells(mesh, layout, center_idx)
    return np.concatenate([mesh.coarse_children(c) for c in coarse])


def center_support_rows(
    mesh: StructuredMesh,
    numbering: DofNumbering,
    layout: LocalizationLayout,
    center_idx: int,
) -> np.ndarray:
    """Sorted global DoF rows on which one center's vectors are nonzero."""
    fine = patch_fine_cells(mesh, layout, center_idx)
    return np.unique(cells_nodes(mesh, numbering, fine))


def column_supports(
    mesh: StructuredMesh,
    numbering: DofNumbering,
    layout: LocalizationLayout,
) -> list[np.ndarray]:
    """Per-center sorted DoF support rows (shared by the center's vectors)."""
    return [
        center_support_rows(mesh, numbering, layout, c)
        for c in range(layout.centers.shape[0])
    ]


def build_support_sparsity(
    mesh: StructuredMesh,
    partition: CellPartition,
    numbering: DofNumbering,
    layout: LocalizationLayout,
    supports: list[np.ndarray] | None = None,
) -> BlockSparsityPattern:
    """Block pattern of the multivector implied by the support patches."""
    if supports is None:
        supports = column_supports(mesh, numbering, layout)
    n_row_blocks = numbering.row_blocks.n_blocks
    rows: list[set] = [set() for _ in range(n_row_blocks)]
    for center in range(layout.centers.shape[0]):
        row_blocks = np.unique(numbering.row_blocks.blocks_of(supports[center]))
        for j in range(layout.vectors_per_center):
            old_col = center * layout.vectors_per_center + j
            col_block = layout.column_blocks.blocks_of(
                [layout.new_col_of_old[old_col]]
            )[0]
            for rb in row_blocks:
                rows[rb].add(int(col_block))
    return BlockSparsityPattern(
        numbering.row_blocks,
        layout.column_blocks,
        [sorted(s) for s in rows],
    )


def cell_block_incidence(mesh: StructuredMesh, numbering: DofNumbering):
    """Boolean cells x row-blocks incidence used for pattern growth."""
    nodes = cells_nodes(mesh, numbering, np.arange(mesh.n_cells))
    blocks = numbering.row_blocks.blocks_of(nodes.ravel()).reshape(nodes.shape)
    cell_ids = np.repeat(np.arange(mesh.n_cells), nodes.shape[1])
    mat = sparse.csr_matrix(
        (
            np.ones(nodes.size, dtype=bool),
            (cell_ids, blocks.ravel()),
        ),
        shape=(mesh.n_cells, numbering.row_blocks.n_blocks),
    )
    mat.sum_duplicates()
    return mat


def grow_sparsity_for_operator(
    pattern: BlockSparsityPattern,
    mesh: StructuredMesh,
    numbering: DofNumbering,
) -> BlockSparsityPattern:
    """Cell-coupling closure of a pattern.

    Block (r, c) of the result is present iff some cell touches both a DoF
    of a block row present at column c and a DoF of block row r; the result
    contains the input.
    """
    inc = cell_block_incidence(mesh, numbering)
    s = pattern.to_bool_csr()
    grown = (inc.T @ (inc @ s)) + s
    return BlockSparsityPattern.from_bool_csr(
        grown, pattern.row_blocks, pattern.col_blocks
    )


def max_patch_overlap(mesh: StructuredMesh, layout: LocalizationLayout) -> int:
    """M_s: the maximum number of patches covering any single fine cell."""
    counts = np.zeros(mesh.n_cells, dtype=np.int64)
    for center in range(layout.centers.shape[0]):
        counts[patch_fine_cells(mesh, layout, center)] += 1
    return int(counts.max()) if counts.size else 0


def stored_rows_per_column(pattern: BlockSparsityPattern) -> np.ndarray:
    """Stored value count per column implied by the block pattern."""
    per_block = np.zeros(pattern.col_blocks.n_blocks, dtype=np.int64)
    for r in range(pattern.row_blocks.n_blocks):
        rsize = pattern.row_blocks.block_size(r)
        for c in pattern.row_cols(r):
            per_block[c] += rsize
    return np.repeat(per_block, pattern.col_blocks.sizes)
