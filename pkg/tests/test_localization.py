import json

import numpy as np
import pytest

from bcsrmv.errors import DomainError
from bcsrmv.localization import (
    assign_centers,
    block_columns_per_rank,
    build_support_sparsity,
    column_supports,
    grow_sparsity_for_operator,
    layout_from_json,
    max_patch_overlap,
    order_and_block_columns,
    patch_fine_cells,
)
from bcsrmv.mesh import build_mesh, cell_nodes, enumerate_dofs, partition_and_order_cells


@pytest.fixture
def mesh4():
    return build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)


def test_assign_center_midpoint(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    owners, cells = assign_centers(mesh4, part, [[1.5, 2.5, 0.5]])
    assert cells[0] == mesh4.cell_id(1, 2, 0)
    assert owners[0] == 0


def test_assign_center_on_rank_boundary_goes_to_lower_rank(mesh4):
    part = partition_and_order_cells(mesh4, 4)
    # find a fine-cell face between two ranks along x
    found = None
    for k in range(4):
        for j in range(4):
            for i in range(3):
                r0 = part.rank_of_cell[mesh4.cell_id(i, j, k)]
                r1 = part.rank_of_cell[mesh4.cell_id(i + 1, j, k)]
                if r0 != r1:
                    found = (i + 1.0, j + 0.5, k + 0.5, min(r0, r1))
                    break
    assert found is not None
    x, y, z, lower = found
    owners, _ = assign_centers(mesh4, part, [[x, y, z]])
    assert owners[0] == lower


def test_assign_center_matches_linear_scan(mesh4):
    part = partition_and_order_cells(mesh4, 2)
    rng = np.random.default_rng(5)
    centers = rng.random((20, 3)) * 4.0
    owners, cells = assign_centers(mesh4, part, centers)
    for idx in range(20):
        hits = [
            c
            for c in range(mesh4.n_cells)
            if np.all(mesh4.cell_centers([c])[0] - 0.5 <= centers[idx] + 1e-12)
            and np.all(centers[idx] <= mesh4.cell_centers([c])[0] + 0.5 + 1e-12)
        ]
        assert cells[idx] in hits
        assert owners[idx] == min(part.rank_of_cell[h] for h in hits)


def test_center_outside_domain(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    with pytest.raises(DomainError):
        assign_centers(mesh4, part, [[5.0, 0.0, 0.0]])


def test_blocking_rule_examples():
    sizes, ranks = block_columns_per_rank([16], 8)
    assert sizes.tolist() == [8, 8]
    sizes, ranks = block_columns_per_rank([20], 8)
    assert sizes.tolist() == [8, 12]
    sizes, ranks = block_columns_per_rank([4, 4], 8)
    assert sizes.tolist() == [4, 4]
    assert ranks.tolist() == [0, 1]
    sizes, ranks = block_columns_per_rank([0, 9], 4)
    assert sizes.tolist() == [4, 5]
    assert ranks.tolist() == [1, 1]


def test_column_blocks_never_straddle_ranks(mesh4):
    part = partition_and_order_cells(mesh4, 4)
    rng = np.random.default_rng(2)
    centers = rng.random((11, 3)) * 4.0
    layout = order_and_block_columns(mesh4, part, centers, 1.0, 2, block_size=3)
    # owner rank per new column, via the permutation
    owner_of_old = np.repeat(layout.owner_rank_of_center, 2)
    owner_of_new = owner_of_old[layout.old_col_of_new]
    for b in range(layout.column_blocks.n_blocks):
        lo = layout.column_blocks.block_start(b)
        hi = lo + layout.column_blocks.block_size(b)
        assert len(set(owner_of_new[lo:hi].tolist())) == 1
        assert owner_of_new[lo] == layout.column_block_rank[b]
    # per rank, centers appear in ascending rank order
    assert np.all(np.diff(owner_of_new) >= 0)


def brute_force_support(mesh, numbering, layout, center_idx):
    """Set of DoFs i such that some patch cell has node i."""
    center = layout.centers[center_idx]
    s = 1 << mesh.coarse_level
    rows = set()
    for cell in range(mesh.n_cells):
        i, j, k = mesh.cell_ijk(cell)
        coarse_ijk = (i // s, j // s, k // s)
        cc = np.asarray(mesh.origin) + (np.asarray(coarse_ijk) + 0.5) * s * np.asarray(
            mesh.spacing
        )
        fine_cell_of_center = mesh.containing_cell(center)
        fi, fj, fk = mesh.cell_ijk(fine_cell_of_center)
        is_container = (fi // s, fj // s, fk // s) == coarse_ijk
        if np.linalg.norm(cc - center) <= layout.radius or is_container:
            rows.update(cell_nodes(mesh, numbering, cell).tolist())
    return rows


def test_support_matches_brute_force(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 2)
    layout = order_and_block_columns(mesh4, part, [[1.1, 0.9, 2.4]], 1.5, 2, 2)
    supports = column_supports(mesh4, numbering, layout)
    expected = brute_force_support(mesh4, numbering, layout, 0)
    assert set(supports[0].tolist()) == expected


def test_radius_zero_keeps_containing_patch(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 1)
    layout = order_and_block_columns(mesh4, part, [[0.4, 0.4, 0.4]], 0.0, 1, 1)
    fine = patch_fine_cells(mesh4, layout, 0)
    # exactly the 8 children of the containing coarse cell
    assert sorted(fine.tolist()) == sorted(
        mesh4.coarse_children(0).tolist()
    )


def test_huge_radius_dense_pattern(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 1)
    layout = order_and_block_columns(mesh4, part, [[2.0, 2.0, 2.0]], 100.0, 2, 2)
    pattern = build_support_sparsity(mesh4, part, numbering, layout)
    assert pattern.n_stored_blocks == pattern.row_blocks.n_blocks
    assert pattern.entry_mask().all()


def test_grow_dense_is_fixed_point(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 1)
    layout = order_and_block_columns(mesh4, part, [[2.0, 2.0, 2.0]], 100.0, 2, 2)
    pattern = build_support_sparsity(mesh4, part, numbering, layout)
    grown = grow_sparsity_for_operator(pattern, mesh4, numbering)
    assert grown == pattern


def test_grow_single_cell_support(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 1)
    layout = order_and_block_columns(mesh4, part, [[0.5, 0.5, 0.5]], 0.0, 1, 1)
    pattern = build_support_sparsity(mesh4, part, numbering, layout)
    grown = grow_sparsity_for_operator(pattern, mesh4, numbering)
    # brute force: all DoF blocks of cells sharing a node with patch cells
    patch = set(patch_fine_cells(mesh4, layout, 0).tolist())
    patch_nodes = set()
    for c in patch:
        patch_nodes.update(cell_nodes(mesh4, numbering, c).tolist())
    blocks = set()
    for cell in range(mesh4.n_cells):
        nodes = cell_nodes(mesh4, numbering, cell).tolist()
        if patch_nodes & set(nodes):
            blocks.update(numbering.row_blocks.blocks_of(nodes).tolist())
    got = {r for r in range(grown.row_blocks.n_blocks) if grown.row_cols(r).size}
    assert got == blocks


def test_grow_monotone_and_contains(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 1)
    layout = order_and_block_columns(mesh4, part, [[1.0, 1.0, 1.0]], 1.0, 2, 2)
    pattern = build_support_sparsity(mesh4, part, numbering, layout)
    g1 = grow_sparsity_for_operator(pattern, mesh4, numbering)
    g2 = grow_sparsity_for_operator(g1, mesh4, numbering)
    assert g1.contains(pattern)
    assert g2.contains(g1)


def test_max_patch_overlap_brute_force(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    rng = np.random.default_rng(9)
    centers = rng.random((5, 3)) * 4.0
    layout = order_and_block_columns(mesh4, part, centers, 1.2, 2, 2)
    counts = np.zeros(mesh4.n_cells, dtype=int)
    for c in range(5):
        counts[patch_fine_cells(mesh4, layout, c)] += 1
    assert max_patch_overlap(mesh4, layout) == counts.max()


def test_support_size_independent_of_column_count(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    numbering = enumerate_dofs(mesh4, part, 2)
    single = order_and_block_columns(mesh4, part, [[2.0, 2.0, 2.0]], 1.0, 2, 2)
    rng = np.random.default_rng(1)
    extra = np.vstack([[2.0, 2.0, 2.0], rng.random((6, 3)) * 4.0])
    many = order_and_block_columns(mesh4, part, extra, 1.0, 2, 2)
    s1 = column_supports(mesh4, numbering, single)[0]
    s2 = column_supports(mesh4, numbering, many)[0]
    assert np.array_equal(s1, s2)


def test_layout_json_roundtrip(mesh4):
    part = partition_and_order_cells(mesh4, 1)
    layout = order_and_block_columns(mesh4, part, [[1.0, 2.0, 3.0]], 2.5, 3, 4)
    doc = layout_from_json(layout.to_json())
    assert doc["radius"] == 2.5
    assert doc["vectors_per_center"] == 3
    assert doc["block_size"] == 4
    assert np.allclose(doc["centers"], [[1.0, 2.0, 3.0]])
    json.loads(layout.to_json())  # valid JSON document
