import numpy as np
import pytest

from bcsrmv.errors import ConfigurationError, DomainError
from bcsrmv.mesh import (
    StructuredMesh,
    build_mesh,
    cell_nodes,
    cells_nodes,
    enumerate_dofs,
    partition_and_order_cells,
)


def old_nodes_of_cell(mesh, degree, cell):
    """Independent re-derivation of a cell's node-grid ids (x fastest)."""
    nx, ny, _ = mesh.extents
    sx = degree * nx + 1
    sy = degree * ny + 1
    i = cell % nx
    j = (cell // nx) % ny
    k = cell // (nx * ny)
    out = []
    for c in range(degree + 1):
        for b in range(degree + 1):
            for a in range(degree + 1):
                out.append(
                    (degree * i + a) + sx * ((degree * j + b) + sy * (degree * k + c))
                )
    return out


def brute_force_first_touch(mesh, partition, degree):
    """Plain-loop first-touch numbering oracle."""
    new_index = {}
    counter = 0
    for cell in partition.ordered_cells:
        for node in old_nodes_of_cell(mesh, degree, cell):
            if node not in new_index:
                new_index[node] = counter
                counter += 1
    return new_index


def test_build_mesh_counts():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 1)
    assert mesh.n_cells == 8
    assert mesh.n_coarse_cells == 1
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    assert mesh.n_cells == 64
    assert mesh.n_coarse_cells == 8
    assert all(len(mesh.coarse_children(c)) == 8 for c in range(8))


def test_node_count_formula():
    mesh = build_mesh((64, 80, 80), (1.0, 1.0, 1.0), 1)
    assert mesh.node_grid_shape(2) == (129, 161, 161)
    assert mesh.n_nodes(2) == 129 * 161 * 161


def test_build_mesh_divisibility_error():
    with pytest.raises(ConfigurationError):
        build_mesh((3, 4, 4), (1.0, 1.0, 1.0), 1)
    with pytest.raises(ConfigurationError):
        build_mesh((0, 4, 4), (1.0, 1.0, 1.0), 0)
    with pytest.raises(ConfigurationError):
        build_mesh((4, 4, 4), (0.0, 1.0, 1.0), 0)


def test_partition_single_rank():
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 1)
    assert np.all(part.rank_of_cell == 0)
    assert sorted(part.ordered_cells.tolist()) == list(range(64))


def test_partition_balance():
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 2)
    assert len(part.cells_of_rank(0)) == 32
    assert len(part.cells_of_rank(1)) == 32
    assert part.rank_group_start.tolist() == [0, 4, 8]


def test_partition_too_many_ranks():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 1)  # one coarse cell
    with pytest.raises(ConfigurationError):
        partition_and_order_cells(mesh, 2)


def test_partition_coarse_groups_face_adjacent():
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 1)
    offs = np.concatenate([[0], np.cumsum(part.coarse_group_sizes)])
    # parent coarse cell of the first fine cell in each ordered group
    parents = []
    for g in range(part.coarse_group_sizes.size):
        fine = part.ordered_cells[offs[g]]
        i, j, k = mesh.cell_ijk(int(fine))
        parents.append((i // 2, j // 2, k // 2))
    for a, b in zip(parents, parents[1:]):
        assert sum(abs(x - y) for x, y in zip(a, b)) == 1


@pytest.mark.parametrize("n_ranks", [1, 2, 4])
@pytest.mark.parametrize("degree", [1, 2])
def test_enumerate_matches_brute_force(degree, n_ranks):
    mesh = build_mesh((4, 4, 2), (1.0, 0.8, 1.2), 1)
    part = partition_and_order_cells(mesh, n_ranks)
    numbering = enumerate_dofs(mesh, part, degree)
    oracle = brute_force_first_touch(mesh, part, degree)
    assert numbering.n_dofs == len(oracle)
    for old, new in oracle.items():
        assert numbering.new_index_of_node[old] == new


def test_small_mesh_single_block():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 1)
    numbering = enumerate_dofs(mesh, part, 1)
    assert numbering.n_dofs == 27
    assert numbering.row_blocks.sizes.tolist() == [27]


def test_dofs_per_cell_counts():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 0)
    part = partition_and_order_cells(mesh, 1)
    assert len(cell_nodes(mesh, enumerate_dofs(mesh, part, 2), 0)) == 27
    assert len(cell_nodes(mesh, enumerate_dofs(mesh, part, 4), 0)) == 125


def test_cell_nodes_distinct_and_conforming():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 1)
    for p in (1, 2):
        numbering = enumerate_dofs(mesh, part, p)
        a = cell_nodes(mesh, numbering, mesh.cell_id(0, 0, 0))
        b = cell_nodes(mesh, numbering, mesh.cell_id(1, 0, 0))
        assert len(set(a.tolist())) == (p + 1) ** 3
        shared = set(a.tolist()) & set(b.tolist())
        assert len(shared) == (p + 1) ** 2


def test_cell_nodes_union_covers_everything():
    mesh = build_mesh((2, 2, 2), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, 1)
    numbering = enumerate_dofs(mesh, part, 2)
    union = np.unique(cells_nodes(mesh, numbering, np.arange(8)))
    assert numbering.n_dofs == 125
    assert np.array_equal(union, np.arange(125))


@pytest.mark.parametrize("n_ranks", [1, 2, 4, 8])
def test_ownership_invariants(n_ranks):
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    part = partition_and_order_cells(mesh, n_ranks)
    numbering = enumerate_dofs(mesh, part, 2)
    ranges = numbering.owned_ranges
    assert ranges[0][0] == 0
    assert ranges[-1][1] == numbering.n_dofs
    for (lo0, hi0), (lo1, hi1) in zip(ranges, ranges[1:]):
        assert hi0 == lo1
    # first-touch ownership: the owner of a DoF is the rank of the first
    # ordered cell containing it, and no containing cell has a lower rank
    owner_of = np.empty(numbering.n_dofs, dtype=int)
    for r, (lo, hi) in enumerate(ranges):
        owner_of[lo:hi] = r
    for cell in range(mesh.n_cells):
        rank = part.rank_of_cell[cell]
        for dof in cell_nodes(mesh, numbering, cell):
            assert owner_of[dof] <= rank
    # row blocks partition [0, N) and each block is owned by one rank
    assert numbering.row_blocks.total == numbering.n_dofs
    for b in range(numbering.row_blocks.n_blocks):
        lo = numbering.row_blocks.block_start(b)
        hi = lo + numbering.row_blocks.block_size(b)
        owners = set(owner_of[lo:hi].tolist())
        assert owners == {int(numbering.block_rank[b])}


def test_numbering_independent_of_rank_count():
    mesh = build_mesh((4, 4, 4), (1.0, 1.0, 1.0), 1)
    references = []
    for n_ranks in (1, 2, 4):
        part = partition_and_order_cells(mesh, n_ranks)
        numbering = enumerate_dofs(mesh, part, 2)
        references.append(
            (numbering.new_index_of_node.copy(), numbering.row_blocks.sizes.copy())
        )
    for perm, sizes in references[1:]:
        assert np.array_equal(perm, references[0][0])
        assert np.array_equal(sizes, references[0][1])


def test_mesh_json_roundtrip():
    mesh = build_mesh((4, 2, 2), (0.5, 1.0, 2.0), 1, origin=(1.0, -2.0, 0.5))
    back = StructuredMesh.from_json(mesh.to_json())
    assert back == mesh


def test_cell_lookup():
    mesh = build_mesh((4, 4, 4), (0.5, 0.5, 0.5), 0)
    assert mesh.containing_cell((0.26, 0.26, 0.26)) == mesh.cell_id(0, 0, 0)
    with pytest.raises(DomainError):
        mesh.containing_cell((3.0, 0.0, 0.0))
