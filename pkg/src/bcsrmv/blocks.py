"""Blockings of index ranges and block-level sparsity patterns."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DomainError, PatternError


class BlockIndices:
    """Partition of [0, total) into contiguous blocks of positive size."""

    def __init__(self, sizes):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1:
            raise ConfigurationError("block sizes must be a 1-d sequence")
        if sizes.size and sizes.min() <= 0:
            raise ConfigurationError("block sizes must be positive")
        self.sizes = sizes
        self.starts = np.zeros(sizes.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=self.starts[1:])

    @property
    def n_blocks(self) -> int:
        return int(self.sizes.size)

    @property
    def total(self) -> int:
        return int(self.starts[-1])

    def block_start(self, b: int) -> int:
        return int(self.starts[b])

    def block_size(self, b: int) -> int:
        return int(self.sizes[b])

    def global_to_block(self, i: int) -> tuple[int, int]:
        """(block, index within block) for a global index, by binary search."""
        if i < 0 or i >= self.total:
            raise DomainError(f"index {i} outside [0, {self.total})")
        b = int(np.searchsorted(self.starts, i, side="right")) - 1
        return b, i - int(self.starts[b])

    def blocks_of(self, indices) -> np.ndarray:
        """Vectorized block ids for an array of global indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.total):
            raise DomainError("index outside the blocked range")
        return np.searchsorted(self.starts, idx, side="right") - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, BlockIndices) and np.array_equal(
            self.sizes, other.sizes
        )

    def __repr__(self) -> str:
        return f"BlockIndices(n_blocks={self.n_blocks}, total={self.total})"


class BlockSparsityPattern:
    """CSR-indexed block sparsity over independent row/column blockings.

    Column block ids of every block row are stored strictly ascending; the
    position of a (row, column) entry in the concatenated column array is
    the linear block index used to address dense block storage.
    """

    def __init__(self, row_blocks: BlockIndices, col_blocks: BlockIndices, rows):
        self.row_blocks = row_blocks
        self.col_blocks = col_blocks
        counts = np.zeros(row_blocks.n_blocks, dtype=np.int64)
        cols = []
        for r, row in enumerate(rows):
            row = np.asarray(row, dtype=np.int64)
            if row.size:
                if np.any(np.diff(row) <= 0):
                    raise PatternError(f"column ids of block row {r} not ascending")
                if row[0] < 0 or row[-1] >= col_blocks.n_blocks:
                    raise PatternError(f"column id out of range in block row {r}")
            counts[r] = row.size
            cols.append(row)
        if len(cols) != row_blocks.n_blocks:
            raise PatternError("one column list required per block row")
        self.row_start = np.zeros(row_blocks.n_blocks + 1, dtype=np.int64)
        np.cumsum(counts, out=self.row_start[1:])
        self.col_index = (
            np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        )

    @property
    def n_stored_blocks(self) -> int:
        return int(self.col_index.size)

    def row_cols(self, r: int) -> np.ndarray:
        return self.col_index[self.row_start[r] : self.row_start[r + 1]]

    def block_pos(self, r: int, c: int) -> int:
        """Linear block index of (r, c), or -1 when absent."""
        lo, hi = int(self.row_start[r]), int(self.row_start[r + 1])
        k = lo + int(np.searchsorted(self.col_index[lo:hi], c))
        if k < hi and self.col_index[k] == c:
            return k
        return -1

    def has(self, r: int, c: int) -> bool:
        return self.block_pos(r, c) >= 0

    def to_bool_csr(self):
        """Block-level boolean matrix (scipy CSR) for pattern algebra."""
        from scipy import sparse

        indptr = self.row_start.copy()
        data = np.ones(self.col_index.size, dtype=bool)
        return sparse.csr_matrix(
            (data, self.col_index.copy(), indptr),
            shape=(self.row_blocks.n_blocks, self.col_blocks.n_blocks),
        )

    @classmethod
    def from_bool_csr(cls, mat, row_blocks: BlockIndices, col_blocks: BlockIndices):
        mat = mat.tocsr()
        mat.sum_duplicates()
        rows = [
            np.sort(mat.indices[mat.indptr[r] : mat.indptr[r + 1]])
            for r in range(mat.shape[0])
        ]
        return cls(row_blocks, col_blocks, rows)

    def entry_mask(self) -> np.ndarray:
        """Dense boolean (total rows x total cols) expansion of the pattern."""
        mask = np.zeros((self.row_blocks.total, self.col_blocks.total), dtype=bool)
        for r in range(self.row_blocks.n_blocks):
            r0, r1 = self.row_blocks.starts[r], self.row_blocks.starts[r + 1]
            for c in self.row_cols(r):
                c0, c1 = self.col_blocks.starts[c], self.col_blocks.starts[c + 1]
                mask[r0:r1, c0:c1] = True
        return mask

    def contains(self, other: "BlockSparsityPattern") -> bool:
        """True when every stored block of `other` is stored here too."""
        if self.row_blocks != other.row_blocks or self.col_blocks != other.col_blocks:
            return False
        for r in range(self.row_blocks.n_blocks):
            mine = self.row_cols(r)
            theirs = other.row_cols(r)
            if theirs.size and not np.all(np.isin(theirs, mine)):
                return False
        return True

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BlockSparsityPattern)
            and self.row_blocks == other.row_blocks
            and self.col_blocks == other.col_blocks
            and np.array_equal(self.row_start, other.row_start)
            and np.array_equal(self.col_index, other.col_index)
        )
