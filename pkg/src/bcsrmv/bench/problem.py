"""Synthetic nanotube-style problem generator.

Atoms sit on stacked rings along the z axis; every atom carries a fixed
number of vectors whose support is the patch of coarse cells within the
localization radius.  The box cross-section is fixed and the length grows
proportionally with the atom count, so the per-column work is constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..blocks import BlockSparsityPattern
from ..errors import ConfigurationError
from ..localization import (
    LocalizationLayout,
    build_support_sparsity,
    column_supports,
    grow_sparsity_for_operator,
    order_and_block_columns,
)
from ..mesh import (
    CellPartition,
    DofNumbering,
    StructuredMesh,
    build_mesh,
    enumerate_dofs,
    partition_and_order_cells,
)
from .config import BenchConfig


def atom_centers(cfg: BenchConfig) -> np.ndarray:
    """Ring-stacked centers, deterministic for a given config."""
    n = cfg.atoms
    per_ring = cfg.rings
    centers = np.empty((n, 3))
    for a in range(n):
        ring, slot = divmod(a, per_ring)
        angle = 2.0 * np.pi * slot / per_ring
        centers[a] = (
            cfg.tube_radius * np.cos(angle),
            cfg.tube_radius * np.sin(angle),
            ring * cfg.ring_spacing,
        )
    return centers


def _round_up(value: float, step: float, multiple: int) -> int:
    cells = int(np.ceil(value / step))
    return max(multiple, ((cells + multiple - 1) // multiple) * multiple)


def auto_extents(cfg: BenchConfig, centers: np.ndarray) -> tuple[tuple, tuple]:
    """(extents, origin) of a box covering the centers with margin."""
    margin = max(cfg.radius * 0.5, max(cfg.spacing))
    lo = centers.min(axis=0) - margin
    hi = centers.max(axis=0) + margin
    mult = 1 << cfg.coarse_level
    extents = tuple(
        _round_up(hi[d] - lo[d], cfg.spacing[d], mult) for d in range(3)
    )
    # re-center the box around the centers
    size = np.asarray(extents) * np.asarray(cfg.spacing)
    mid = (lo + hi) / 2.0
    origin = tuple(mid - size / 2.0)
    return extents, origin


@dataclass
class Problem:
    cfg: BenchConfig
    mesh: StructuredMesh
    partition: CellPartition
    numbering: DofNumbering
    loc_layout: LocalizationLayout
    pattern: BlockSparsityPattern
    grown: BlockSparsityPattern
    centers: np.ndarray
    supports: list  # per-center sorted DoF rows


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; deterministic across platforms
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    return x ^ (x >> np.uint64(31))


def hashed_values(seed: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-random fill keyed by (seed, row, column).

    Using a counter hash instead of a sequential generator keeps block
    values identical for any rank count and column permutation.
    """
    r = np.asarray(rows, dtype=np.uint64)[:, None]
    c = np.asarray(cols, dtype=np.uint64)[None, :]
    h = _mix64(
        r * np.uint64(0x9E3779B97F4A7C15)
        + c * np.uint64(0xD1B54A32D192ED03)
        + np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    )
    return h.astype(np.float64) / float(2**64) - 0.5


def fill_multivector(matrix, layout: LocalizationLayout, seed: int, supports):
    """Seeded fill of owned blocks, keyed to the original column labels.

    Values are masked by the true per-column support, so stored blocks are
    only partially filled and the scalar content of the multivector does
    not depend on the column blocking or the rank count.
    """
    old_of_new = layout.old_col_of_new
    v = layout.vectors_per_center

    def values(rows, cols):
        old = old_of_new[cols]
        vals = hashed_values(seed, rows, old)
        for j, old_col in enumerate(old):
            inside = np.isin(rows, supports[old_col // v], assume_unique=True)
            vals[~inside, j] = 0.0
        return vals

    matrix.fill_owned(values)


def support_mask(prob: "Problem") -> np.ndarray:
    """Dense (rows x columns) boolean mask of the true supports."""
    lay = prob.loc_layout
    mask = np.zeros((prob.numbering.n_dofs, lay.n_columns), dtype=bool)
    for new_col in range(lay.n_columns):
        center = int(lay.old_col_of_new[new_col]) // lay.vectors_per_center
        mask[prob.supports[center], new_col] = True
    return mask


def dense_phi(prob: "Problem") -> np.ndarray:
    """Dense reference multivector matching fill_multivector."""
    vals = hashed_values(
        prob.cfg.seed,
        np.arange(prob.numbering.n_dofs),
        prob.loc_layout.old_col_of_new,
    )
    return np.where(support_mask(prob), vals, 0.0)


def generate_problem(cfg: BenchConfig) -> Problem:
    """Mesh, partition, numbering, column layout and support sparsity."""
    cfg.validate()
    centers = atom_centers(cfg)
    if cfg.extents is not None:
        extents = tuple(int(n) for n in cfg.extents)
        size = np.asarray(extents) * np.asarray(cfg.spacing)
        mid = (centers.min(axis=0) + centers.max(axis=0)) / 2.0
        origin = tuple(mid - size / 2.0)
        mesh = build_mesh(extents, cfg.spacing, cfg.coarse_level, origin)
        lo, hi = mesh.box
        if np.any(centers < lo) or np.any(centers > hi):
            suggestion, _ = auto_extents(cfg, centers)
            raise ConfigurationError(
                f"domain extents {extents} too small for the atom layout and "
                f"radius {cfg.radius}; suggested extents: {list(suggestion)}"
            )
    else:
        extents, origin = auto_extents(cfg, centers)
        mesh = build_mesh(extents, cfg.spacing, cfg.coarse_level, origin)
    partition = partition_and_order_cells(mesh, cfg.n_ranks)
    numbering = enumerate_dofs(mesh, partition, cfg.degree)
    loc_layout = order_and_block_columns(
        mesh,
        partition,
        centers,
        cfg.radius,
        vectors_per_center=cfg.vectors_per_atom,
        block_size=cfg.block_size,
    )
    supports = column_supports(mesh, numbering, loc_layout)
    pattern = build_support_sparsity(mesh, partition, numbering, loc_layout, supports)
    grown = grow_sparsity_for_operator(pattern, mesh, numbering)
    return Problem(
        cfg, mesh, partition, numbering, loc_layout, pattern, grown, centers, supports
    )
