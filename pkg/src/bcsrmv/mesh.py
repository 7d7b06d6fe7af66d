"""Structured hexahedral mesh, cell partitioning and DoF enumeration.

Fine cells are grouped under coarse parents `coarse_level` bisections up;
coarse groups are ordered along a Hilbert curve and dealt out to ranks as
contiguous runs, so row blocks never straddle ranks.  DoFs are numbered by
first touch along the ordered cell list, which makes the numbering (and
the row blocking) independent of the rank count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import ceil, log2

import numpy as np

from .blocks import BlockIndices
from .errors import ConfigurationError, DomainError
from .hilbert import order_by_hilbert


@dataclass(frozen=True)
class StructuredMesh:
    extents: tuple[int, int, int]
    spacing: tuple[float, float, float]
    coarse_level: int
    origin: tuple[float, float, float]

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.extents
        return nx * ny * nz

    @property
    def coarse_extents(self) -> tuple[int, int, int]:
        s = 1 << self.coarse_level
        return tuple(n // s for n in self.extents)

    @property
    def n_coarse_cells(self) -> int:
        cx, cy, cz = self.coarse_extents
        return cx * cy * cz

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + np.asarray(self.extents) * np.asarray(self.spacing)
        return lo, hi

    @property
    def volume(self) -> float:
        hx, hy, hz = self.spacing
        return self.n_cells * hx * hy * hz

    def cell_id(self, i: int, j: int, k: int) -> int:
        nx, ny, _ = self.extents
        return i + nx * (j + ny * k)

    def cell_ijk(self, cell: int) -> tuple[int, int, int]:
        nx, ny, _ = self.extents
        i = cell % nx
        j = (cell // nx) % ny
        k = cell // (nx * ny)
        return i, j, k

    def cell_centers(self, cells=None) -> np.ndarray:
        if cells is None:
            cells = np.arange(self.n_cells)
        cells = np.asarray(cells, dtype=np.int64)
        nx, ny, _ = self.extents
        ijk = np.stack(
            [cells % nx, (cells // nx) % ny, cells // (nx * ny)], axis=-1
        )
        return np.asarray(self.origin) + (ijk + 0.5) * np.asarray(self.spacing)

    def coarse_centers(self) -> np.ndarray:
        cx, cy, _ = self.coarse_extents
        s = (1 << self.coarse_level) * np.asarray(self.spacing)
        ids = np.arange(self.n_coarse_cells)
        ijk = np.stack(
            [ids % cx, (ids // cx) % cy, ids // (cx * cy)], axis=-1
        )
        return np.asarray(self.origin) + (ijk + 0.5) * s

    def coarse_children(self, coarse: int) -> np.ndarray:
        """Fine cell ids under one coarse cell, lexicographic (x fastest)."""
        cx, cy, _ = self.coarse_extents
        s = 1 << self.coarse_level
        ci = coarse % cx
        cj = (coarse // cx) % cy
        ck = coarse // (cx * cy)
        loc = np.arange(s)
        ii = ci * s + loc
        jj = cj * s + loc
        kk = ck * s + loc
        nx, ny, _ = self.extents
        return (
            ii[None, None, :]
            + nx * (jj[None, :, None] + ny * kk[:, None, None])
        ).ravel()

    def containing_cell(self, point) -> int:
        """Closed-form cell lookup; boundary points go to the upper cell."""
        p = np.asarray(point, dtype=float)
        lo, hi = self.box
        if np.any(p < lo) or np.any(p > hi):
            raise DomainError(f"point {p.tolist()} outside the mesh box")
        idx = np.minimum(
            ((p - lo) / np.asarray(self.spacing)).astype(np.int64),
            np.asarray(self.extents) - 1,
        )
        return self.cell_id(*idx)

    def boundary_candidate_cells(self, point) -> np.ndarray:
        """All cells whose closed extent contains the point (up to 8)."""
        p = np.asarray(point, dtype=float)
        lo, hi = self.box
        if np.any(p < lo) or np.any(p > hi):
            raise DomainError(f"point {p.tolist()} outside the mesh box")
        t = (p - lo) / np.asarray(self.spacing)
        axes = []
        for d in range(3):
            base = min(int(t[d]), self.extents[d] - 1)
            cand = {base}
            if t[d] == int(t[d]) and base > 0 and int(t[d]) == base:
                cand.add(base - 1)
            axes.append(sorted(cand))
        cells = [
            self.cell_id(i, j, k) for k in axes[2] for j in axes[1] for i in axes[0]
        ]
        return np.asarray(sorted(cells), dtype=np.int64)

    def node_grid_shape(self, degree: int) -> tuple[int, int, int]:
        return tuple(degree * n + 1 for n in self.extents)

    def n_nodes(self, degree: int) -> int:
        sx, sy, sz = self.node_grid_shape(degree)
        return sx * sy * sz

    def to_json(self) -> str:
        return json.dumps(
            {
                "extents": list(self.extents),
                "spacing": list(self.spacing),
                "coarse_level": self.coarse_level,
                "origin": list(self.origin),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "StructuredMesh":
        doc = json.loads(text)
        return build_mesh(
            doc["extents"], doc["spacing"], doc["coarse_level"], doc["origin"]
        )


def build_mesh(extents, spacing, coarse_level=0, origin=(0.0, 0.0, 0.0)) -> StructuredMesh:
    extents = tuple(int(n) for n in extents)
    spacing = tuple(float(h) for h in spacing)
    origin = tuple(float(o) for o in origin)
    if len(extents) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise ConfigurationError("extents, spacing and origin must have 3 entries")
    if any(n < 1 for n in extents):
        raise ConfigurationError(f"extents must be >= 1, got {extents}")
    if any(h <= 0 for h in spacing):
        raise ConfigurationError(f"spacing must be positive, got {spacing}")
    if coarse_level < 0:
        raise ConfigurationError("coarse_level must be non-negative")
    s = 1 << coarse_level
    if any(n % s for n in extents):
        raise ConfigurationError(
            f"extents {extents} not divisible by 2**{coarse_level}"
        )
    return StructuredMesh(extents, spacing, coarse_level, origin)


@dataclass(frozen=True)
class CellPartition:
    n_ranks: int
    rank_of_cell: np.ndarray
    ordered_cells: np.ndarray
    coarse_group_sizes: np.ndarray
    group_rank: np.ndarray
    rank_group_start: np.ndarray  # (n_ranks + 1,) group boundaries

    def cells_of_rank(self, rank: int) -> np.ndarray:
        g0, g1 = self.rank_group_start[rank], self.rank_group_start[rank + 1]
        offs = np.zeros(self.coarse_group_sizes.size + 1, dtype=np.int64)
        np.cumsum(self.coarse_group_sizes, out=offs[1:])
        return self.ordered_cells[offs[g0] : offs[g1]]


def partition_and_order_cells(mesh: StructuredMesh, n_ranks: int) -> CellPartition:
    """Order coarse groups along the Hilbert curve and deal them to ranks."""
    if n_ranks < 1:
        raise ConfigurationError("n_ranks must be >= 1")
    n_groups = mesh.n_coarse_cells
    if n_ranks > n_groups:
        raise ConfigurationError(
            f"{n_ranks} ranks but only {n_groups} coarse cells; every rank "
            "must own cells"
        )
    levels = max(1, ceil(log2(max(mesh.coarse_extents))))
    lo, hi = mesh.box
    order = order_by_hilbert(mesh.coarse_centers(), lo, hi, levels)
    ordered = [mesh.coarse_children(c) for c in order]
    ordered_cells = np.concatenate(ordered)
    group_sizes = np.asarray([len(g) for g in ordered], dtype=np.int64)

    base, rem = divmod(n_groups, n_ranks)
    counts = np.full(n_ranks, base, dtype=np.int64)
    counts[:rem] += 1
    rank_group_start = np.zeros(n_ranks + 1, dtype=np.int64)
    np.cumsum(counts, out=rank_group_start[1:])
    group_rank = np.repeat(np.arange(n_ranks), counts)

    rank_of_cell = np.empty(mesh.n_cells, dtype=np.int64)
    rank_of_cell[ordered_cells] = np.repeat(group_rank, group_sizes)
    return CellPartition(
        n_ranks, rank_of_cell, ordered_cells, group_sizes, group_rank, rank_group_start
    )


def _cell_node_offsets(mesh: StructuredMesh, degree: int) -> np.ndarray:
    """Flat node-grid offsets of a cell's nodes, local lexicographic order."""
    sx, sy, _ = mesh.node_grid_shape(degree)
    loc = np.arange(degree + 1)
    return (
        loc[None, None, :]
        + sx * (loc[None, :, None] + sy * loc[:, None, None])
    ).ravel()


def _cell_node_base(mesh: StructuredMesh, degree: int, cells) -> np.ndarray:
    sx, sy, _ = mesh.node_grid_shape(degree)
    nx, ny, _ = mesh.extents
    cells = np.asarray(cells, dtype=np.int64)
    i = cells % nx
    j = (cells // nx) % ny
    k = cells // (nx * ny)
    return degree * (i + sx * (j + sy * k))


@dataclass(frozen=True)
class DofNumbering:
    degree: int
    n_dofs: int
    new_index_of_node: np.ndarray
    owned_ranges: tuple[tuple[int, int], ...]
    row_blocks: BlockIndices
    block_rank: np.ndarray
    rank_block_start: np.ndarray  # (n_ranks + 1,) row-block boundaries

    def owner_of_row(self, row: int) -> int:
        for r, (lo, hi) in enumerate(self.owned_ranges):
            if lo <= row < hi:
                return r
        raise DomainError(f"row {row} outside [0, {self.n_dofs})")


def enumerate_dofs(mesh: StructuredMesh, partition: CellPartition, degree: int) -> DofNumbering:
    """First-touch DoF numbering along ordered cells, plus row blocking.

    Every node gets the next unused index the first time a cell containing
    it is visited (nodes inside a cell in lexicographic order, x fastest).
    Row block b collects the DoFs first seen in ordered coarse group b;
    groups contributing no new DoFs are dropped.
    """
    if degree not in (1, 2, 3, 4):
        raise ConfigurationError(f"degree must be in 1..4, got {degree}")
    n_nodes = mesh.n_nodes(degree)
    n_local = (degree + 1) ** 3
    offsets = _cell_node_offsets(mesh, degree)
    base = _cell_node_base(mesh, degree, partition.ordered_cells)
    nodes = base[:, None] + offsets[None, :]

    touch_key = np.arange(nodes.size, dtype=np.int64)
    first_key = np.full(n_nodes, nodes.size, dtype=np.int64)
    np.minimum.at(first_key, nodes.ravel(), touch_key)
    if first_key.max() >= nodes.size:
        raise ConfigurationError("mesh traversal did not reach every node")

    perm = np.argsort(first_key, kind="stable")
    new_index_of_node = np.empty(n_nodes, dtype=np.int64)
    new_index_of_node[perm] = np.arange(n_nodes)

    # Coarse group (and rank) of the first-touch cell of every node.
    first_cell_pos = first_key // n_local
    group_offsets = np.zeros(partition.coarse_group_sizes.size + 1, dtype=np.int64)
    np.cumsum(partition.coarse_group_sizes, out=group_offsets[1:])
    group_of_node = np.searchsorted(group_offsets, first_cell_pos, side="right") - 1
    group_counts = np.bincount(
        group_of_node, minlength=partition.coarse_group_sizes.size
    )

    keep = group_counts > 0
    row_blocks = BlockIndices(group_counts[keep])
    block_rank = partition.group_rank[keep]

    n_ranks = partition.n_ranks
    rank_counts = np.bincount(
        partition.group_rank, weights=group_counts, minlength=n_ranks
    ).astype(np.int64)
    bounds = np.zeros(n_ranks + 1, dtype=np.int64)
    np.cumsum(rank_counts, out=bounds[1:])
    owned_ranges = tuple(
        (int(bounds[r]), int(bounds[r + 1])) for r in range(n_ranks)
    )
    rank_block_start = np.searchsorted(
        block_rank, np.arange(n_ranks + 1), side="left"
    ).astype(np.int64)
    return DofNumbering(
        degree,
        n_nodes,
        new_index_of_node,
        owned_ranges,
        row_blocks,
        block_rank,
        rank_block_start,
    )


def cell_nodes(mesh: StructuredMesh, numbering: DofNumbering, cell: int) -> np.ndarray:
    """Global DoF indices of one cell, local lexicographic node order."""
    if cell < 0 or cell >= mesh.n_cells:
        raise DomainError(f"cell {cell} outside [0, {mesh.n_cells})")
    p = numbering.degree
    base = _cell_node_base(mesh, p, np.asarray([cell]))[0]
    return numbering.new_index_of_node[base + _cell_node_offsets(mesh, p)]


def cells_nodes(mesh: StructuredMesh, numbering: DofNumbering, cells) -> np.ndarray:
    """cell_nodes for many cells at once; shape (n_cells, (p+1)**3)."""
    p = numbering.degree
    base = _cell_node_base(mesh, p, cells)
    return numbering.new_index_of_node[
        base[:, None] + _cell_node_offsets(mesh, p)[None, :]
    ]
