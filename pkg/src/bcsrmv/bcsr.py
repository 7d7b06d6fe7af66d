"""Block-compressed sparse row multivectors with ghost rows and SpMM kernels.

A matrix instance holds the dense blocks of its rank's owned block rows
followed by ghost row blocks replicated from other ranks.  Ghost rows are
grouped within the owning rank's block boundaries; the ghost sparsity of a
group is the owner's column list for that block row.  All storage lives in
one 64-byte aligned array; each dense block is row-major with its row
stride padded to a multiple of the lane width, and padded lanes always
hold exact zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .blocks import BlockIndices, BlockSparsityPattern
from .counters import OpCounters
from .errors import (
    ConsistencyError,
    DomainError,
    PatternError,
    ProtocolError,
    ShapeError,
    StateError,
)

OWNED = "owned-writable"
GHOSTED = "ghost-readable"
GHOST_XCHG = "ghost-update-in-flight"
COMPRESS_XCHG = "compress-in-flight"


def group_rows_by_block(rows, blocks: BlockIndices) -> list[tuple[int, np.ndarray]]:
    """Group sorted row indices by the block of `blocks` containing them.

    Rows of one block form one group; groups never merge across block
    boundaries.  Returns (block id, rows) pairs in ascending block order.
    """
    rows = np.unique(np.asarray(rows, dtype=np.int64))
    if rows.size == 0:
        return []
    block_of = blocks.blocks_of(rows)
    out = []
    for b in np.unique(block_of):
        out.append((int(b), rows[block_of == b]))
    return out


@dataclass(frozen=True)
class GhostGroup:
    owner: int
    block: int  # global block id on the owner
    rows: np.ndarray  # global row ids, ascending
    rows_in_block: np.ndarray


@dataclass(frozen=True)
class ImportGroup:
    peer: int
    block: int  # my global block id
    rows_in_block: np.ndarray


class RankLayout:
    """Row ownership, ghost groups and the pairwise exchange plan."""

    def __init__(self, rank, n_ranks, blocks, rank_block_start, ghost_groups, import_groups):
        self.rank = rank
        self.n_ranks = n_ranks
        self.blocks = blocks
        self.rank_block_start = np.asarray(rank_block_start, dtype=np.int64)
        self.ghost_groups = list(ghost_groups)
        self.import_groups = list(import_groups)
        self.first_block = int(self.rank_block_start[rank])
        self.n_owned_blocks = int(self.rank_block_start[rank + 1]) - self.first_block
        self.owned_rows = (
            int(blocks.starts[self.first_block]),
            int(blocks.starts[self.first_block + self.n_owned_blocks]),
        )
        self._ghost_local = {
            g.block: self.n_owned_blocks + i for i, g in enumerate(self.ghost_groups)
        }
        if self.ghost_groups:
            self.ghost_rows_flat = np.concatenate([g.rows for g in self.ghost_groups])
            counts = [len(g.rows) for g in self.ghost_groups]
        else:
            self.ghost_rows_flat = np.zeros(0, dtype=np.int64)
            counts = []
        self.ghost_offsets = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=self.ghost_offsets[1:])

    @property
    def n_local_blocks(self) -> int:
        return self.n_owned_blocks + len(self.ghost_groups)

    def owner_of_block(self, gb: int) -> int:
        return int(np.searchsorted(self.rank_block_start, gb, side="right")) - 1

    def owns_block(self, gb: int) -> bool:
        return self.first_block <= gb < self.first_block + self.n_owned_blocks

    def local_block_of_global(self, gb: int) -> int:
        """Local id of a global block row; owned first, then ghosts."""
        if self.owns_block(gb):
            return gb - self.first_block
        local = self._ghost_local.get(gb)
        if local is None:
            raise PatternError(
                f"rank {self.rank} holds no ghost of block row {gb}"
            )
        return local

    def global_block_of_local(self, lb: int) -> int:
        if lb < self.n_owned_blocks:
            return self.first_block + lb
        return self.ghost_groups[lb - self.n_owned_blocks].block

    def local_row_count(self, lb: int) -> int:
        if lb < self.n_owned_blocks:
            return self.blocks.block_size(self.first_block + lb)
        return len(self.ghost_groups[lb - self.n_owned_blocks].rows)

    def map_rows(self, rows) -> tuple[np.ndarray, np.ndarray]:
        """(local block, row within block) for global rows, vectorized."""
        rows = np.asarray(rows, dtype=np.int64)
        lb = np.empty(rows.size, dtype=np.int64)
        rib = np.empty(rows.size, dtype=np.int64)
        lo, hi = self.owned_rows
        owned = (rows >= lo) & (rows < hi)
        if owned.any():
            g = self.blocks.blocks_of(rows[owned])
            lb[owned] = g - self.first_block
            rib[owned] = rows[owned] - self.blocks.starts[g]
        rest = ~owned
        if rest.any():
            pos = np.searchsorted(self.ghost_rows_flat, rows[rest])
            bad = (pos >= self.ghost_rows_flat.size) | (
                self.ghost_rows_flat[np.minimum(pos, self.ghost_rows_flat.size - 1)]
                != rows[rest]
            ) if self.ghost_rows_flat.size else np.ones(rest.sum(), dtype=bool)
            if np.any(bad):
                missing = rows[rest][np.asarray(bad)][0]
                raise ConsistencyError(
                    f"rank {self.rank} touches unmapped row {missing}"
                )
            grp = np.searchsorted(self.ghost_offsets, pos, side="right") - 1
            lb[rest] = self.n_owned_blocks + grp
            rib[rest] = pos - self.ghost_offsets[grp]
        return lb, rib


def serial_layout(blocks: BlockIndices) -> RankLayout:
    return RankLayout(0, 1, blocks, [0, blocks.n_blocks], [], [])


def build_rank_layout(ctx, blocks: BlockIndices, rank_block_start, ghost_rows) -> RankLayout:
    """Collective layout construction with pairwise ghost-request exchange.

    Every rank groups its ghost rows within the owners' block boundaries,
    sends each owner the requested rows, and verifies the echoed group row
    counts; mismatches raise ProtocolError.
    """
    rank_block_start = np.asarray(rank_block_start, dtype=np.int64)
    me = ctx.rank
    lid = ctx.next_matrix_id()
    groups = group_rows_by_block(ghost_rows, blocks)
    ghost_groups = []
    per_owner: dict[int, list] = {}
    for block, rows in groups:
        owner = int(np.searchsorted(rank_block_start, block, side="right")) - 1
        if owner == me:
            raise ConsistencyError(f"rank {me} lists its own row as ghost")
        ghost_groups.append(
            GhostGroup(owner, block, rows, rows - blocks.starts[block])
        )
        per_owner.setdefault(owner, []).append((block, rows))

    for peer in range(ctx.n_ranks):
        if peer == me:
            continue
        req = per_owner.get(peer, [])
        payload = (
            np.asarray([b for b, _ in req], dtype=np.int64),
            [rows for _, rows in req],
        )
        ctx.isend(peer, ("ghost_req", lid), payload)

    import_groups = []
    echoes = {}
    for peer in range(ctx.n_ranks):
        if peer == me:
            continue
        req_blocks, req_rows = ctx.irecv(peer, ("ghost_req", lid)).wait()
        for b, rows in zip(req_blocks, req_rows):
            b = int(b)
            lo = int(blocks.starts[b])
            hi = int(blocks.starts[b + 1])
            owner = int(np.searchsorted(rank_block_start, b, side="right")) - 1
            if owner != me or rows.min() < lo or rows.max() >= hi:
                raise ProtocolError(
                    f"rank {me}: peer {peer} requested rows outside my block {b}"
                )
            import_groups.append(ImportGroup(peer, b, rows - lo))
        echoes[peer] = (
            req_blocks.copy(),
            np.asarray([len(r) for r in req_rows], dtype=np.int64),
        )

    for peer, echo in echoes.items():
        ctx.isend(peer, ("ghost_ack", lid), echo)
    for peer in range(ctx.n_ranks):
        if peer == me:
            continue
        blocks_echo, counts_echo = ctx.irecv(peer, ("ghost_ack", lid)).wait()
        req = per_owner.get(peer, [])
        want_blocks = np.asarray([b for b, _ in req], dtype=np.int64)
        want_counts = np.asarray([len(r) for _, r in req], dtype=np.int64)
        if not (
            np.array_equal(blocks_echo, want_blocks)
            and np.array_equal(counts_echo, want_counts)
        ):
            raise ProtocolError(
                f"rank {me}: ghost plan with rank {peer} is inconsistent"
            )

    import_groups.sort(key=lambda g: (g.peer, g.block))
    return RankLayout(me, ctx.n_ranks, blocks, rank_block_start, ghost_groups, import_groups)


def _aligned_zeros(n: int) -> np.ndarray:
    buf = np.zeros(n + 8, dtype=np.float64)
    off = (-buf.ctypes.data) % 64 // 8
    return buf[off : off + n]


class BlockCsrMatrix:
    """Rank-local view of a distributed BCSR matrix.

    Constructed from the global block pattern plus a RankLayout; ghost
    block rows inherit the owner's column list.  One instance belongs to
    one logical rank and must not be shared across ranks.
    """

    def __init__(self, pattern: BlockSparsityPattern, layout: RankLayout, ctx=None, lane_width: int = 8):
        if pattern.row_blocks != layout.blocks:
            raise ShapeError("pattern row blocking does not match the layout")
        if lane_width < 1:
            raise DomainError("lane width must be positive")
        if ctx is None and layout.n_ranks > 1:
            raise ShapeError("multi-rank matrices need a rank context")
        self.pattern = pattern
        self.layout = layout
        self.ctx = ctx
        self.lane_width = int(lane_width)
        self.col_blocks = pattern.col_blocks
        w = self.lane_width
        self.col_strides = ((self.col_blocks.sizes + w - 1) // w * w).astype(np.int64)

        n_local = layout.n_local_blocks
        cols = []
        row_sizes = np.empty(n_local, dtype=np.int64)
        for lb in range(n_local):
            gb = layout.global_block_of_local(lb)
            cols.append(np.asarray(pattern.row_cols(gb), dtype=np.int64))
            row_sizes[lb] = layout.local_row_count(lb)
        self.local_row_sizes = row_sizes
        counts = np.asarray([c.size for c in cols], dtype=np.int64)
        self.row_start = np.zeros(n_local + 1, dtype=np.int64)
        np.cumsum(counts, out=self.row_start[1:])
        self.col_index = (
            np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        )
        self.pos_row = np.repeat(np.arange(n_local, dtype=np.int64), counts)

        block_values = row_sizes[self.pos_row] * self.col_strides[self.col_index]
        self.block_offsets = np.zeros(self.col_index.size + 1, dtype=np.int64)
        np.cumsum(block_values, out=self.block_offsets[1:])
        self._ghost_data_begin = int(
            self.block_offsets[self.row_start[layout.n_owned_blocks]]
        )
        self.data = _aligned_zeros(int(self.block_offsets[-1]))
        self.state = OWNED
        self._mid = ctx.next_matrix_id() if ctx is not None else 0
        self._pending = None

    # -- basic views ----------------------------------------------------

    @property
    def n_owned_blocks(self) -> int:
        return self.layout.n_owned_blocks

    @property
    def n_local_blocks(self) -> int:
        return self.layout.n_local_blocks

    def row_cols_local(self, lb: int) -> np.ndarray:
        return self.col_index[self.row_start[lb] : self.row_start[lb + 1]]

    def block_values(self, pos: int) -> np.ndarray:
        """Padded (rows x stride) view of the dense block at a CSR position."""
        rows = int(self.local_row_sizes[self.pos_row[pos]])
        stride = int(self.col_strides[self.col_index[pos]])
        off = int(self.block_offsets[pos])
        return self.data[off : off + rows * stride].reshape(rows, stride)

    def block_valid(self, pos: int) -> np.ndarray:
        cols = int(self.col_blocks.sizes[self.col_index[pos]])
        return self.block_values(pos)[:, :cols]

    def block_pos_local(self, lb: int, col: int) -> int:
        lo, hi = int(self.row_start[lb]), int(self.row_start[lb + 1])
        k = lo + int(np.searchsorted(self.col_index[lo:hi], col))
        if k < hi and self.col_index[k] == col:
            return k
        return -1

    def _require(self, *states):
        if self.state not in states:
            raise StateError(
                f"operation requires state in {states}, matrix is {self.state}"
            )

    def ensure_owned(self):
        if self.state == GHOSTED:
            self.release_ghosts()
        else:
            self._require(OWNED)

    # -- elementwise ----------------------------------------------------

    def zero_out(self):
        self._require(OWNED)
        self.data[:] = 0.0

    def zero_ghost_blocks(self):
        self.data[self._ghost_data_begin :] = 0.0

    def release_ghosts(self):
        """Leave the read-only ghosted state; ghost values are dropped."""
        self._require(GHOSTED)
        self.zero_ghost_blocks()
        self.state = OWNED

    def copy(self) -> "BlockCsrMatrix":
        out = BlockCsrMatrix(self.pattern, self.layout, self.ctx, self.lane_width)
        out.data[:] = self.data
        out.state = self.state
        return out

    def fill_owned(self, fn):
        """Set every owned block to fn(global_rows, global_cols) values."""
        self._require(OWNED)
        for pos in range(int(self.row_start[self.n_owned_blocks])):
            lb = int(self.pos_row[pos])
            gb = self.layout.global_block_of_local(lb)
            r0 = int(self.layout.blocks.starts[gb])
            rows = np.arange(r0, r0 + int(self.local_row_sizes[lb]))
            c = int(self.col_index[pos])
            c0 = int(self.col_blocks.starts[c])
            cols = np.arange(c0, c0 + int(self.col_blocks.sizes[c]))
            self.block_valid(pos)[:] = fn(rows, cols)

    def to_dense_owned(self) -> np.ndarray:
        """Dense (rows x cols) array holding this rank's owned blocks."""
        out = np.zeros((self.layout.blocks.total, self.col_blocks.total))
        for pos in range(int(self.row_start[self.n_owned_blocks])):
            lb = int(self.pos_row[pos])
            gb = self.layout.global_block_of_local(lb)
            r0 = int(self.layout.blocks.starts[gb])
            c = int(self.col_index[pos])
            c0 = int(self.col_blocks.starts[c])
            v = self.block_valid(pos)
            out[r0 : r0 + v.shape[0], c0 : c0 + v.shape[1]] = v
        return out

    def norm_owned_sq(self) -> float:
        lim = self._ghost_data_begin
        return float(np.dot(self.data[:lim], self.data[:lim]))

    def get_entry(self, row: int, col: int) -> float:
        lb, rib = self.layout.map_rows([row])
        cb, cic = self.col_blocks.global_to_block(col)
        pos = self.block_pos_local(int(lb[0]), cb)
        if pos < 0:
            return 0.0
        return float(self.block_values(pos)[int(rib[0]), cic])

    def add_entry(self, row: int, col: int, value: float):
        lb, rib = self.layout.map_rows([row])
        cb, cic = self.col_blocks.global_to_block(col)
        pos = self.block_pos_local(int(lb[0]), cb)
        if pos < 0:
            raise PatternError(f"block for entry ({row}, {col}) not stored")
        self.block_values(pos)[int(rib[0]), cic] += value

    # -- ghost exchange ---------------------------------------------------

    def _pack_for_peer(self, groups) -> np.ndarray:
        parts = []
        for g in groups:
            lb = g.block - self.layout.first_block
            for pos in range(int(self.row_start[lb]), int(self.row_start[lb + 1])):
                cols = int(self.col_blocks.sizes[self.col_index[pos]])
                parts.append(
                    self.block_values(pos)[g.rows_in_block, :cols].ravel()
                )
        if not parts:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate(parts)

    def _imports_by_peer(self) -> dict[int, list]:
        plan: dict[int, list] = {}
        for g in self.layout.import_groups:
            plan.setdefault(g.peer, []).append(g)
        return plan

    def _ghosts_by_owner(self) -> dict[int, list[int]]:
        plan: dict[int, list[int]] = {}
        for i, g in enumerate(self.layout.ghost_groups):
            plan.setdefault(g.owner, []).append(i)
        return plan

    def update_ghost_values_start(self):
        if self.state in (GHOST_XCHG, COMPRESS_XCHG):
            raise StateError(f"exchange already in flight ({self.state})")
        self._require(OWNED)
        recvs = []
        if self.ctx is not None:
            for peer, groups in sorted(self._imports_by_peer().items()):
                self.ctx.isend(peer, ("ugv", self._mid), self._pack_for_peer(groups))
            for owner in sorted(self._ghosts_by_owner()):
                recvs.append((owner, self.ctx.irecv(owner, ("ugv", self._mid))))
        self._pending = recvs
        self.state = GHOST_XCHG

    def update_ghost_values_finish(self):
        if self.state != GHOST_XCHG:
            raise StateError("no ghost update in flight")
        owners = self._ghosts_by_owner()
        for owner, handle in self._pending:
            payload = handle.wait()
            off = 0
            for gi in owners[owner]:
                g = self.layout.ghost_groups[gi]
                lb = self.layout.n_owned_blocks + gi
                n = len(g.rows)
                for pos in range(int(self.row_start[lb]), int(self.row_start[lb + 1])):
                    cols = int(self.col_blocks.sizes[self.col_index[pos]])
                    chunk = payload[off : off + n * cols].reshape(n, cols)
                    self.block_valid(pos)[:] = chunk
                    off += n * cols
            if off != payload.size:
                raise ProtocolError(
                    f"rank {self.layout.rank}: ghost payload from {owner} has "
                    f"{payload.size} values, consumed {off}"
                )
        self._pending = None
        self.state = GHOSTED

    def update_ghost_values(self):
        self.update_ghost_values_start()
        self.update_ghost_values_finish()

    def compress_start(self):
        if self.state in (GHOST_XCHG, COMPRESS_XCHG):
            raise StateError(f"exchange already in flight ({self.state})")
        self._require(OWNED)
        recvs = []
        if self.ctx is not None:
            for owner, gids in sorted(self._ghosts_by_owner().items()):
                parts = []
                for gi in gids:
                    g = self.layout.ghost_groups[gi]
                    lb = self.layout.n_owned_blocks + gi
                    for pos in range(
                        int(self.row_start[lb]), int(self.row_start[lb + 1])
                    ):
                        parts.append(self.block_valid(pos).ravel())
                buf = (
                    np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)
                )
                self.ctx.isend(owner, ("cmp", self._mid), buf)
            for peer in sorted(self._imports_by_peer()):
                recvs.append((peer, self.ctx.irecv(peer, ("cmp", self._mid))))
        self._pending = recvs
        self.state = COMPRESS_XCHG

    def compress_finish(self):
        """Add received contributions in ascending source-rank order."""
        if self.state != COMPRESS_XCHG:
            raise StateError("no compress in flight")
        plan = self._imports_by_peer()
        for peer, handle in self._pending:
            payload = handle.wait()
            off = 0
            for g in plan[peer]:
                lb = g.block - self.layout.first_block
                n = len(g.rows_in_block)
                for pos in range(int(self.row_start[lb]), int(self.row_start[lb + 1])):
                    cols = int(self.col_blocks.sizes[self.col_index[pos]])
                    chunk = payload[off : off + n * cols].reshape(n, cols)
                    view = self.block_values(pos)
                    view[g.rows_in_block, :cols] += chunk
                    off += n * cols
            if off != payload.size:
                raise ProtocolError(
                    f"rank {self.layout.rank}: compress payload from {peer} has "
                    f"{payload.size} values, consumed {off}"
                )
        self.zero_ghost_blocks()
        self._pending = None
        self.state = OWNED

    def compress(self):
        self.compress_start()
        self.compress_finish()


def serial_matrix(pattern: BlockSparsityPattern, lane_width: int = 8) -> BlockCsrMatrix:
    return BlockCsrMatrix(pattern, serial_layout(pattern.row_blocks), None, lane_width)


# -- elementwise utilities ---------------------------------------------


def zero_out(m: BlockCsrMatrix):
    m.zero_out()


def scale_add(c: BlockCsrMatrix, a: float, x: BlockCsrMatrix | None = None, b: float = 0.0):
    """c <- a*c + b*x over stored blocks; x's pattern must sit inside c's."""
    c._require(OWNED)
    c.data *= a
    if x is None or b == 0.0:
        return
    if x.col_blocks != c.col_blocks or x.layout.blocks != c.layout.blocks:
        raise ShapeError("scale_add operands have different blockings")
    for pos in range(int(x.row_start[x.n_owned_blocks])):
        lb = int(x.pos_row[pos])
        col = int(x.col_index[pos])
        cpos = c.block_pos_local(lb, col)
        if cpos < 0:
            raise ShapeError(
                f"scale_add: block ({lb}, {col}) of x missing from c's pattern"
            )
        c.block_valid(cpos)[:] += b * x.block_valid(pos)


def copy_pattern_subset(dst: BlockCsrMatrix, src: BlockCsrMatrix):
    """dst <- src values where both patterns store the block, zero elsewhere."""
    dst.ensure_owned()
    dst.zero_out()
    if src.col_blocks != dst.col_blocks or src.layout.blocks != dst.layout.blocks:
        raise ShapeError("copy_pattern_subset operands have different blockings")
    for pos in range(int(dst.row_start[dst.n_owned_blocks])):
        lb = int(dst.pos_row[pos])
        col = int(dst.col_index[pos])
        spos = src.block_pos_local(lb, col)
        if spos >= 0:
            dst.block_valid(pos)[:] = src.block_valid(spos)


def add_scaled_identity(c: BlockCsrMatrix, s: float):
    """c <- c + s*I on owned diagonal blocks (square blocking required)."""
    c._require(OWNED)
    for lb in range(c.n_owned_blocks):
        gb = c.layout.global_block_of_local(lb)
        pos = c.block_pos_local(lb, gb)
        if pos < 0:
            raise PatternError(f"diagonal block ({gb}, {gb}) not stored")
        v = c.block_valid(pos)
        n = min(v.shape)
        v[np.arange(n), np.arange(n)] += s


# -- matrix products ----------------------------------------------------


def _check_inner(a: BlockCsrMatrix, b: BlockCsrMatrix):
    if not np.array_equal(a.col_blocks.sizes, b.layout.blocks.sizes):
        raise ShapeError("inner blockings of the product operands differ")


def mmult(a: BlockCsrMatrix, b: BlockCsrMatrix, c: BlockCsrMatrix, alpha: float = 1.0,
          accumulate: bool = False, counters: OpCounters | None = None):
    """c = alpha * a @ b, truncated to c's pattern (Gustavson loop order).

    `b` must hold ghost values consistent with the column sparsity of `a`;
    blocks of the product absent from `c` are silently discarded.  With
    `accumulate`, the product is added to the current content of `c`.
    """
    _check_inner(a, b)
    if a.layout.blocks != c.layout.blocks or a.layout.rank != c.layout.rank:
        raise ShapeError("a and c must share row blocking and partitioning")
    if c.col_blocks != b.col_blocks:
        raise ShapeError("b and c must share column blocking")
    if b.state != GHOSTED and b.layout.ghost_groups:
        raise StateError("b must have updated ghost values before mmult")
    c.ensure_owned()
    if not accumulate:
        c.zero_out()
    for i in range(a.n_owned_blocks):
        for pos_a in range(int(a.row_start[i]), int(a.row_start[i + 1])):
            k = int(a.col_index[pos_a])
            kb = b.layout.local_block_of_global(k)
            if b.local_row_sizes[kb] != a.col_blocks.sizes[k]:
                raise ShapeError(
                    f"row block {k} of b is incomplete (split ghost group)"
                )
            a_blk = a.block_valid(pos_a)
            c_pos = int(c.row_start[i])
            c_end = int(c.row_start[i + 1])
            for pos_b in range(int(b.row_start[kb]), int(b.row_start[kb + 1])):
                j = int(b.col_index[pos_b])
                while c_pos < c_end and c.col_index[c_pos] < j:
                    c_pos += 1
                if c_pos == c_end:
                    break
                if c.col_index[c_pos] == j:
                    prod = a_blk @ b.block_valid(pos_b)
                    if alpha != 1.0:
                        prod *= alpha
                    c.block_valid(c_pos)[:] += prod
                    if counters is not None:
                        counters.flops += 2 * prod.shape[0] * a_blk.shape[1] * prod.shape[1]


def tmmult(a: BlockCsrMatrix, b: BlockCsrMatrix, c: BlockCsrMatrix,
           counters: OpCounters | None = None):
    """c = a.T @ b followed by a compress of c.

    a and b share row blocking and partitioning; c's pattern must contain
    every block of the product (missing blocks raise PatternError).
    """
    if a.layout.blocks != b.layout.blocks or a.layout.rank != b.layout.rank:
        raise ShapeError("a and b must share row blocking and partitioning")
    if not np.array_equal(c.layout.blocks.sizes, a.col_blocks.sizes):
        raise ShapeError("c's row blocking must equal a's column blocking")
    if c.col_blocks != b.col_blocks:
        raise ShapeError("c's column blocking must equal b's")
    c.ensure_owned()
    c.zero_out()
    for i in range(a.n_owned_blocks):
        for pos_a in range(int(a.row_start[i]), int(a.row_start[i + 1])):
            k = int(a.col_index[pos_a])
            ck = c.layout.local_block_of_global(k)
            a_blk = a.block_valid(pos_a)
            c_pos = int(c.row_start[ck])
            c_end = int(c.row_start[ck + 1])
            for pos_b in range(int(b.row_start[i]), int(b.row_start[i + 1])):
                ell = int(b.col_index[pos_b])
                while c_pos < c_end and c.col_index[c_pos] < ell:
                    c_pos += 1
                if c_pos == c_end or c.col_index[c_pos] != ell:
                    raise PatternError(
                        f"tmmult destination misses block ({k}, {ell})"
                    )
                b_blk = b.block_valid(pos_b)
                c.block_valid(c_pos)[:] += a_blk.T @ b_blk
                if counters is not None:
                    counters.flops += (
                        2 * a_blk.shape[1] * a_blk.shape[0] * b_blk.shape[1]
                    )
    c.compress()


def tr_tmmult(d: BlockCsrMatrix, g: BlockCsrMatrix,
              counters: OpCounters | None = None) -> float:
    """tr(d.T @ g): the column-wise inner product, reduced over all ranks."""
    if d.layout.blocks != g.layout.blocks or d.layout.rank != g.layout.rank:
        raise ShapeError("operands must share row blocking and partitioning")
    if d.col_blocks != g.col_blocks:
        raise ShapeError("operands must share column blocking")
    local = 0.0
    for i in range(d.n_owned_blocks):
        dp, de = int(d.row_start[i]), int(d.row_start[i + 1])
        gp, ge = int(g.row_start[i]), int(g.row_start[i + 1])
        while dp < de and gp < ge:
            cd, cg = int(d.col_index[dp]), int(g.col_index[gp])
            if cd < cg:
                dp += 1
            elif cg < cd:
                gp += 1
            else:
                dv = d.block_valid(dp)
                gv = g.block_valid(gp)
                local += float(np.dot(dv.ravel(), gv.ravel()))
                if counters is not None:
                    counters.flops += 2 * dv.size
                dp += 1
                gp += 1
    if d.ctx is not None:
        return float(d.ctx.allreduce_sum(local))
    return local


def tr_mult(t: BlockCsrMatrix, h: BlockCsrMatrix,
            counters: OpCounters | None = None) -> float:
    """tr(t @ h) over stored blocks; h must be ghosted for remote rows."""
    if not np.array_equal(t.col_blocks.sizes, h.layout.blocks.sizes):
        raise ShapeError("inner blockings differ")
    if not np.array_equal(t.layout.blocks.sizes, h.col_blocks.sizes):
        raise ShapeError("outer blockings differ")
    if h.state != GHOSTED and h.layout.ghost_groups:
        raise StateError("h must have updated ghost values before tr_mult")
    local = 0.0
    for lb in range(t.n_owned_blocks):
        k = t.layout.global_block_of_local(lb)
        for pos in range(int(t.row_start[lb]), int(t.row_start[lb + 1])):
            ell = int(t.col_index[pos])
            hl = h.layout.local_block_of_global(ell)
            hpos = h.block_pos_local(hl, k)
            if hpos < 0:
                continue
            tv = t.block_valid(pos)
            hv = h.block_valid(hpos)
            local += float(np.dot(tv.ravel(), hv.T.ravel()))
            if counters is not None:
                counters.flops += 2 * tv.size
    if t.ctx is not None:
        return float(t.ctx.allreduce_sum(local))
    return local


# -- serialization -------------------------------------------------------


def to_debug_json(m: BlockCsrMatrix) -> str:
    """Readable dump of the local pattern and blocks.

    Layout: `rows` holds one record per local block row with its global
    block id, row count and column block ids; `blocks` lists the valid
    (unpadded) values of every stored block in CSR order.
    """
    rows = []
    for lb in range(m.n_local_blocks):
        rows.append(
            {
                "global_block": m.layout.global_block_of_local(lb),
                "n_rows": int(m.local_row_sizes[lb]),
                "ghost": lb >= m.n_owned_blocks,
                "cols": [int(c) for c in m.row_cols_local(lb)],
            }
        )
    blocks = [
        {
            "row": int(m.pos_row[pos]),
            "col": int(m.col_index[pos]),
            "values": m.block_valid(pos).tolist(),
        }
        for pos in range(m.col_index.size)
    ]
    return json.dumps(
        {
            "lane_width": m.lane_width,
            "state": m.state,
            "row_block_sizes": m.local_row_sizes.tolist(),
            "col_block_sizes": m.col_blocks.sizes.tolist(),
            "rows": rows,
            "blocks": blocks,
        }
    )


def value_bytes(m: BlockCsrMatrix) -> bytes:
    """The full value array as little-endian 8-byte reals."""
    return m.data.astype("<f8").tobytes()


def load_value_bytes(m: BlockCsrMatrix, raw: bytes):
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != m.data.size:
        raise ShapeError(
            f"value buffer holds {arr.size} reals, matrix stores {m.data.size}"
        )
    m.data[:] = arr
