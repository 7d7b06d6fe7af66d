"""Matrix-free mass/Hamiltonian application on BCSR multivectors.

The cell loop reads and writes BCSR blocks through a RowsBlockAccessor
that merges the non-empty column blocks of the block rows touched by a
cell; cell integrals are evaluated either by sum factorization or by a
dense element-matrix product, with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .bcsr import BlockCsrMatrix, RankLayout, build_rank_layout, serial_layout
from .blocks import BlockSparsityPattern
from .counters import OpCounters
from .errors import PatternError, ShapeError
from .localization import grow_sparsity_for_operator
from .mesh import CellPartition, DofNumbering, StructuredMesh, cells_nodes
from .shapes import ShapeInfo, shape_info

MASS = "mass"
HAMILTONIAN = "hamiltonian"


@dataclass(frozen=True)
class OperatorSpec:
    """Which bilinear form to apply; the potential only matters for H."""

    kind: str
    potential: object = None  # None, a constant, or a callable of (n, 3) points

    def sample_potential(self, points: np.ndarray) -> np.ndarray:
        if self.potential is None:
            return np.zeros(points.shape[0])
        if callable(self.potential):
            return np.asarray(self.potential(points), dtype=float)
        return np.full(points.shape[0], float(self.potential))

    @property
    def potential_is_constant(self) -> bool:
        return not callable(self.potential)


def mass_operator() -> OperatorSpec:
    return OperatorSpec(MASS)


def hamiltonian_operator(potential=None) -> OperatorSpec:
    return OperatorSpec(HAMILTONIAN, potential)


# -- cell DoF map ---------------------------------------------------------


@dataclass(frozen=True)
class CellDoFMap:
    """Per-cell association from cell DoFs to (block row, row in block).

    `dof_indices` holds (row within block, DoF within cell) pairs grouped
    by block; `block_indices` holds (local block row id, group size) in
    first-occurrence order; `cell_offsets[c]` gives the start of cell c in
    both arrays.
    """

    dof_indices: np.ndarray  # (n, 2)
    block_indices: np.ndarray  # (m, 2)
    cell_offsets: np.ndarray  # (n_cells + 1, 2)
    n_cell_dofs: int

    @property
    def n_cells(self) -> int:
        return self.cell_offsets.shape[0] - 1

    def cell_groups(self, cell: int):
        """(local block, rows-in-block, dofs-in-cell) triples of one cell."""
        d0, b0 = self.cell_offsets[cell]
        _, b1 = self.cell_offsets[cell + 1]
        out = []
        off = int(d0)
        for block, count in self.block_indices[int(b0) : int(b1)]:
            pairs = self.dof_indices[off : off + int(count)]
            out.append((int(block), pairs[:, 0], pairs[:, 1]))
            off += int(count)
        return out


def build_cell_dof_map_from_rows(cell_rows, map_rows) -> CellDoFMap:
    """Assemble the three flat arrays from per-cell global row lists.

    `map_rows` translates an array of global rows to (local block,
    row-in-block) pairs; groups keep the order in which blocks first occur
    along the cell's DoFs, and pairs keep DoF order within each group.
    """
    dof_pairs = []
    block_pairs = []
    offsets = np.zeros((len(cell_rows) + 1, 2), dtype=np.int64)
    n_cell_dofs = len(cell_rows[0]) if len(cell_rows) else 0
    for ci, rows in enumerate(cell_rows):
        lb, rib = map_rows(np.asarray(rows, dtype=np.int64))
        groups: dict[int, list] = {}
        for d in range(len(rows)):
            groups.setdefault(int(lb[d]), []).append((int(rib[d]), d))
        for block, pairs in groups.items():
            block_pairs.append((block, len(pairs)))
            dof_pairs.extend(pairs)
        offsets[ci + 1] = (len(dof_pairs), len(block_pairs))
    return CellDoFMap(
        np.asarray(dof_pairs, dtype=np.int64).reshape(-1, 2),
        np.asarray(block_pairs, dtype=np.int64).reshape(-1, 2),
        offsets,
        n_cell_dofs,
    )


def build_cell_dof_map(
    mesh: StructuredMesh,
    numbering: DofNumbering,
    layout: RankLayout,
    cells,
) -> CellDoFMap:
    """Cell DoF map over the given cells against a rank layout.

    A cell touching a row that is neither owned nor ghosted raises
    ConsistencyError.
    """
    rows = cells_nodes(mesh, numbering, cells)
    return build_cell_dof_map_from_rows(list(rows), layout.map_rows)


def owned_cell_ghost_rows(
    mesh: StructuredMesh,
    numbering: DofNumbering,
    partition: CellPartition,
    rank: int,
) -> np.ndarray:
    """Global rows touched by the rank's cells but owned elsewhere."""
    cells = partition.cells_of_rank(rank)
    touched = np.unique(cells_nodes(mesh, numbering, cells))
    lo, hi = numbering.owned_ranges[rank]
    return touched[(touched < lo) | (touched >= hi)]


def make_dof_layout(ctx, mesh, partition, numbering) -> RankLayout:
    """Row layout of DoF-space multivectors for this rank."""
    ghost = owned_cell_ghost_rows(mesh, numbering, partition, ctx.rank)
    return build_rank_layout(
        ctx, numbering.row_blocks, numbering.rank_block_start, ghost
    )


# -- block-row accessor ----------------------------------------------------

_EXHAUSTED = np.iinfo(np.int64).max


class RowsBlockAccessor:
    """Cursor bundle over the non-empty column blocks of a cell's rows.

    After reinit the current column block C is the minimum column over the
    cell's block-row cursors; a row is active exactly when its cursor sits
    on C.  advance() moves every cursor with column < C+1 forward and
    re-derives C, returning None once all rows are exhausted.
    """

    def __init__(self, matrix: BlockCsrMatrix, cell_map: CellDoFMap):
        self.matrix = matrix
        self.cell_map = cell_map
        self._groups = []
        self._cursor: list[int] = []
        self._end: list[int] = []
        self._col: list[int] = []
        self.current_col: int | None = None

    def _column_at(self, g: int) -> int:
        if self._cursor[g] >= self._end[g]:
            return _EXHAUSTED
        return int(self.matrix.col_index[self._cursor[g]])

    def _refresh_current(self) -> int | None:
        c = min(self._col) if self._col else _EXHAUSTED
        self.current_col = None if c == _EXHAUSTED else c
        return self.current_col

    def reinit(self, cell: int) -> int | None:
        """Point cursors at the cell's block-row beginnings; return C."""
        self._groups = self.cell_map.cell_groups(cell)
        rs = self.matrix.row_start
        self._cursor = [int(rs[b]) for b, _, _ in self._groups]
        self._end = [int(rs[b + 1]) for b, _, _ in self._groups]
        self._col = [self._column_at(g) for g in range(len(self._groups))]
        return self._refresh_current()

    def advance(self) -> int | None:
        """Step to the next non-empty column block; None when exhausted."""
        if self.current_col is None:
            return None
        limit = self.current_col + 1
        for g in range(len(self._groups)):
            if self._cursor[g] < self._end[g] and self._col[g] < limit:
                self._cursor[g] += 1
                self._col[g] = self._column_at(g)
        return self._refresh_current()

    def advance_to(self, col: int):
        """Align every cursor on `col` (write side of the cell loop)."""
        for g in range(len(self._groups)):
            while self._cursor[g] < self._end[g] and self._col[g] < col:
                self._cursor[g] += 1
                self._col[g] = self._column_at(g)
            if self._col[g] != col:
                block = self._groups[g][0]
                raise PatternError(
                    f"destination pattern misses column block {col} in local "
                    f"block row {block}"
                )
        self.current_col = col

    def active_groups(self):
        """(rows-in-block, dofs-in-cell, padded block view) of active rows."""
        c = self.current_col
        out = []
        for g, (block, rows, dofs) in enumerate(self._groups):
            if self._col[g] == c:
                out.append((rows, dofs, self.matrix.block_values(self._cursor[g])))
        return out

    def emitted_columns(self, cell: int) -> list[int]:
        """Full C sequence for a cell (diagnostic and testing helper)."""
        out = []
        c = self.reinit(cell)
        while c is not None:
            out.append(c)
            c = self.advance()
        return out


# -- cell integrals ---------------------------------------------------------


def _contract(mat: np.ndarray, tensor: np.ndarray, axis: int) -> np.ndarray:
    """Apply a (q_out, n_in) matrix along one axis of a 4-tensor."""
    return np.moveaxis(np.tensordot(mat, tensor, axes=(1, axis)), 0, axis)


class _CellKernels:
    """Per-(degree, spacing) tables shared by all cells of a mesh."""

    def __init__(self, shape: ShapeInfo, spacing):
        self.shape = shape
        hx, hy, hz = (float(h) for h in spacing)
        self.det = hx * hy * hz
        w = shape.weights
        self.w3 = (w[:, None, None] * w[None, :, None] * w[None, None, :]) * self.det
        self.grad_scale = (0.5 / hx**2, 0.5 / hy**2, 0.5 / hz**2)
        # physical offsets of the quadrature grid within a cell, x fastest
        pts = shape.points
        gz, gy, gx = np.meshgrid(pts * hz, pts * hy, pts * hx, indexing="ij")
        self.quad_offsets = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        s, d = shape.values, shape.derivatives
        self.n3 = np.kron(s, np.kron(s, s))  # (q^3, (p+1)^3), z slowest
        self.g3 = (
            np.kron(s, np.kron(s, d)),
            np.kron(s, np.kron(d, s)),
            np.kron(d, np.kron(s, s)),
        )

    def cell_quad_points(self, cell_origin) -> np.ndarray:
        return np.asarray(cell_origin) + self.quad_offsets


class _Flops:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0

    def contract(self, mat, tensor) -> int:
        # one matrix application along an axis: 2 * n_in * out_size madds
        return 2 * mat.shape[0] * tensor.size

    def add(self, k):
        self.n += k


def cell_integrals_sumfac(
    kernels: _CellKernels,
    spec: OperatorSpec,
    u_flat: np.ndarray,
    v_q: np.ndarray | None = None,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Apply the cell operator to ((p+1)^3, W) values by 1D contractions."""
    shape = kernels.shape
    p1 = shape.degree + 1
    lanes = u_flat.shape[1]
    u = u_flat.reshape(p1, p1, p1, lanes)
    s, d = shape.values, shape.derivatives
    st, dt = s.T, d.T
    fl = _Flops()

    t_z = _contract(s, u, 0)
    fl.add(fl.contract(s, u))
    t_zy = _contract(s, t_z, 1)
    fl.add(fl.contract(s, t_z))
    uq = _contract(s, t_zy, 2)
    fl.add(fl.contract(s, t_zy))

    if spec.kind == MASS:
        uq = uq * kernels.w3[..., None]
        fl.add(uq.size)
        r = _contract(st, uq, 2)
        fl.add(fl.contract(st, uq))
        r = _contract(st, r, 1)
        fl.add(fl.contract(st, r))
        out = _contract(st, r, 0)
        fl.add(fl.contract(st, r))
        if counters is not None:
            counters.flops += fl.n
        return out.reshape(-1, lanes)

    if spec.kind != HAMILTONIAN:
        raise ShapeError(f"unknown operator kind {spec.kind!r}")

    gx = _contract(d, t_zy, 2)
    fl.add(fl.contract(d, t_zy))
    t_zd = _contract(d, t_z, 1)
    fl.add(fl.contract(d, t_z))
    gy = _contract(s, t_zd, 2)
    fl.add(fl.contract(s, t_zd))
    t_dz = _contract(d, u, 0)
    fl.add(fl.contract(d, u))
    t_dzy = _contract(s, t_dz, 1)
    fl.add(fl.contract(s, t_dz))
    gz = _contract(s, t_dzy, 2)
    fl.add(fl.contract(s, t_dzy))

    cx, cy, cz = kernels.grad_scale
    gx = gx * (kernels.w3 * cx)[..., None]
    gy = gy * (kernels.w3 * cy)[..., None]
    gz = gz * (kernels.w3 * cz)[..., None]
    fl.add(gx.size + gy.size + gz.size)

    # out = S'S'(S'u + D'gx) + S'D'(S'gy) + D'S'(S'gz), axes z,y,x outward
    ax = _contract(dt, gx, 2)
    fl.add(fl.contract(dt, gx))
    if v_q is not None:
        q = shape.n_q
        uq = uq * (kernels.w3 * v_q.reshape(q, q, q))[..., None]
        fl.add(2 * uq.size)
        ax = ax + _contract(st, uq, 2)
        fl.add(fl.contract(st, uq) + ax.size)
    by = _contract(st, gy, 2)
    fl.add(fl.contract(st, gy))
    cz_low = _contract(st, gz, 2)
    fl.add(fl.contract(st, gz))
    ab = _contract(st, ax, 1) + _contract(dt, by, 1)
    fl.add(fl.contract(st, ax) + fl.contract(dt, by) + ab.size)
    cc = _contract(st, cz_low, 1)
    fl.add(fl.contract(st, cz_low))
    out = _contract(st, ab, 0) + _contract(dt, cc, 0)
    fl.add(fl.contract(st, ab) + fl.contract(dt, cc) + out.size)
    if counters is not None:
        counters.flops += fl.n
    return out.reshape(-1, lanes)


def _mirror_upper(a: np.ndarray) -> np.ndarray:
    u = np.triu(a)
    return u + u.T - np.diag(np.diag(a))


def element_matrices(
    shape: ShapeInfo,
    spec: OperatorSpec,
    spacing,
    v_q: np.ndarray | None = None,
) -> np.ndarray:
    """Dense element matrix by direct quadrature; symmetric by construction.

    The potential enters through `v_q`, its values at the cell's q^3
    quadrature points.
    """
    kernels = _CellKernels(shape, spacing)
    w = kernels.w3.ravel()
    if spec.kind == MASS:
        return _mirror_upper(kernels.n3.T @ (w[:, None] * kernels.n3))
    if spec.kind != HAMILTONIAN:
        raise ShapeError(f"unknown operator kind {spec.kind!r}")
    out = np.zeros((kernels.n3.shape[1], kernels.n3.shape[1]))
    for g, c in zip(kernels.g3, kernels.grad_scale):
        out += g.T @ ((w * c)[:, None] * g)
    if v_q is not None:
        out += kernels.n3.T @ ((w * v_q)[:, None] * kernels.n3)
    return _mirror_upper(out)


# -- the operator -----------------------------------------------------------

SUMFAC = "sumfac"
GEMM = "gemm"


class CellOperator:
    """Rank-local matrix-free operator bound to a mesh and a row layout."""

    def __init__(
        self,
        mesh: StructuredMesh,
        partition: CellPartition,
        numbering: DofNumbering,
        layout: RankLayout,
    ):
        self.mesh = mesh
        self.partition = partition
        self.numbering = numbering
        self.layout = layout
        self.cells = partition.cells_of_rank(layout.rank)
        self.cell_map = build_cell_dof_map(mesh, numbering, layout, self.cells)
        self.shape = shape_info(numbering.degree)
        self.kernels = _CellKernels(self.shape, mesh.spacing)
        if len(self.cells):
            ijk = np.stack([mesh.cell_ijk(c) for c in self.cells])
            self.cell_origins = np.asarray(mesh.origin) + ijk * np.asarray(mesh.spacing)
        else:
            self.cell_origins = np.zeros((0, 3))
        self._ematrix_cache: dict = {}

    def _base_matrix(self, kind: str) -> np.ndarray:
        base = self._ematrix_cache.get(kind)
        if base is None:
            # kinetic/mass part; cell-independent on a cartesian mesh
            base = element_matrices(self.shape, OperatorSpec(kind), self.mesh.spacing)
            self._ematrix_cache[kind] = base
        return base

    def _element_matrix(self, spec: OperatorSpec, v_q: np.ndarray | None):
        base = self._base_matrix(spec.kind)
        if spec.kind != HAMILTONIAN or v_q is None or not np.any(v_q):
            return base
        if spec.potential_is_constant:
            key = (spec.kind, float(spec.potential))
            cached = self._ematrix_cache.get(key)
            if cached is not None:
                return cached
        w = self.kernels.w3.ravel() * v_q
        pot = _mirror_upper(self.kernels.n3.T @ (w[:, None] * self.kernels.n3))
        full = base + pot
        if spec.potential_is_constant:
            self._ematrix_cache[(spec.kind, float(spec.potential))] = full
        return full

    def _needs_potential(self, spec: OperatorSpec) -> bool:
        return spec.kind == HAMILTONIAN and spec.potential is not None

    def apply(
        self,
        spec: OperatorSpec,
        src: BlockCsrMatrix,
        dst: BlockCsrMatrix,
        variant: str = SUMFAC,
        counters: OpCounters | None = None,
    ):
        """dst = Op(spec) @ src over the rank's cells, then compress dst."""
        if src.layout is not self.layout or dst.layout is not self.layout:
            raise ShapeError("operator and operands must share one rank layout")
        if src.col_blocks != dst.col_blocks or src.lane_width != dst.lane_width:
            raise ShapeError("src and dst must share column blocking and lanes")
        if variant not in (SUMFAC, GEMM):
            raise ShapeError(f"unknown operator variant {variant!r}")
        w = src.lane_width
        n_dofs_cell = self.cell_map.n_cell_dofs
        dst.ensure_owned()
        dst.zero_out()
        src.update_ghost_values()
        racc = RowsBlockAccessor(src, self.cell_map)
        wacc = RowsBlockAccessor(dst, self.cell_map)
        const_pot = None
        if self._needs_potential(spec) and spec.potential_is_constant:
            const_pot = np.full(self.shape.n_q**3, float(spec.potential))
        strides = src.col_strides
        for ci in range(len(self.cells)):
            c = racc.reinit(ci)
            if c is None:
                continue
            wacc.reinit(ci)
            if counters is not None:
                counters.cells_visited += 1
            v_q = const_pot
            if self._needs_potential(spec) and v_q is None:
                v_q = spec.sample_potential(
                    self.kernels.cell_quad_points(self.cell_origins[ci])
                )
            ematrix = self._element_matrix(spec, v_q) if variant == GEMM else None
            while c is not None:
                wacc.advance_to(c)
                stride = int(strides[c])
                reads = racc.active_groups()
                writes = wacc.active_groups()
                for lane in range(0, stride, w):
                    u = np.zeros((n_dofs_cell, w))
                    for rows, dofs, values in reads:
                        u[dofs] = values[rows, lane : lane + w]
                    if variant == SUMFAC:
                        out = cell_integrals_sumfac(self.kernels, spec, u, v_q, counters)
                    else:
                        out = ematrix @ u
                        if counters is not None:
                            counters.flops += 2 * ematrix.size * w
                    for rows, dofs, values in writes:
                        values[rows, lane : lane + w] += out[dofs]
                if counters is not None:
                    counters.col_blocks_visited += 1
                    counters.dof_lane_slots += n_dofs_cell * stride
                c = racc.advance()
        src.release_ghosts()
        dst.compress()
        if counters is not None:
            ghost_vals = sum(
                len(g.rows) * src.pattern.row_cols(g.block).size
                for g in self.layout.ghost_groups
            )
            counters.bytes_moved += (
                src.data.nbytes + 2 * dst.data.nbytes + 16 * ghost_vals
            )


def assemble_reference(
    mesh: StructuredMesh,
    numbering: DofNumbering,
    spec: OperatorSpec,
    n_q: int | None = None,
):
    """Assembled sparse operator for verification (single rank only).

    Each unordered DoF pair is accumulated once (upper triangle) and
    mirrored, so the result is exactly symmetric.
    """
    shape = shape_info(numbering.degree, n_q)
    kernels = _CellKernels(shape, mesh.spacing)
    nodes = cells_nodes(mesh, numbering, np.arange(mesh.n_cells))
    rows_list = []
    cols_list = []
    vals_list = []
    needs_v = spec.kind == HAMILTONIAN and spec.potential is not None
    const_matrix = None
    if not needs_v or spec.potential_is_constant:
        v_q = np.full(shape.n_q**3, float(spec.potential)) if needs_v else None
        const_matrix = element_matrices(shape, spec, mesh.spacing, v_q)
    for cell in range(mesh.n_cells):
        if const_matrix is not None:
            ek = const_matrix
        else:
            origin = np.asarray(mesh.origin) + np.asarray(
                mesh.cell_ijk(cell)
            ) * np.asarray(mesh.spacing)
            v_q = spec.sample_potential(kernels.cell_quad_points(origin))
            ek = element_matrices(shape, spec, mesh.spacing, v_q)
        gi = nodes[cell]
        big_i = np.repeat(gi, gi.size)
        big_j = np.tile(gi, gi.size)
        keep = big_i <= big_j
        rows_list.append(big_i[keep])
        cols_list.append(big_j[keep])
        vals_list.append(ek.ravel()[keep])
    upper = sparse.coo_matrix(
        (
            np.concatenate(vals_list),
            (np.concatenate(rows_list), np.concatenate(cols_list)),
        ),
        shape=(numbering.n_dofs, numbering.n_dofs),
    ).tocsr()
    return (upper + upper.T - sparse.diags(upper.diagonal())).tocsr()


def flop_report(
    variant: str,
    mesh: StructuredMesh,
    spec: OperatorSpec,
    pattern: BlockSparsityPattern,
    partition: CellPartition,
    numbering: DofNumbering,
    lane_width: int = 8,
) -> dict:
    """Analytic flop/byte accounting of one operator application (serial).

    `flops_per_dof` divides counted flops by the DoF-lane slots processed
    in the cell loop; element-matrix setup of the gemm variant is excluded,
    matching a reference approach that stores element matrices.
    """
    layout = serial_layout(numbering.row_blocks)
    grown = grow_sparsity_for_operator(pattern, mesh, numbering)
    src = BlockCsrMatrix(pattern, layout, None, lane_width)
    dst = BlockCsrMatrix(grown, layout, None, lane_width)
    rng = np.random.default_rng(0)
    src.fill_owned(lambda r, c: rng.random((r.size, c.size)) - 0.5)
    op = CellOperator(mesh, partition, numbering, layout)
    counters = OpCounters()
    op.apply(spec, src, dst, variant=variant, counters=counters)
    return {
        "variant": variant,
        "kind": spec.kind,
        "flops": counters.flops,
        "dof_lane_slots": counters.dof_lane_slots,
        "flops_per_dof": counters.flops_per_dof,
        "col_blocks_visited": counters.col_blocks_visited,
        "cells_visited": counters.cells_visited,
        "bytes_est": counters.bytes_moved,
    }
