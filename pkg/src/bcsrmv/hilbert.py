"""Hilbert space-filling-curve keys for integer lattice points.

The curve is used to order mesh cells and localization centers so that
consecutive items are spatial neighbours.  The base orientation is fixed:
coordinates are processed in input order with the first axis acting as the
primary axis of the order-1 template, so d=2, levels=1 visits
(0,0), (0,1), (1,1), (1,0).  In one dimension the curve is the identity
walk.
"""

from dataclasses import dataclass
from math import ceil, log2

import numpy as np

from .errors import DomainError

_WORD_BITS = 64
_WORD_MASK = (1 << _WORD_BITS) - 1


@dataclass(frozen=True, order=True)
class HilbertKey:
    """Comparable curve position, stored as big-endian 64-bit digits."""

    digits: tuple[int, ...]

    @property
    def index(self) -> int:
        value = 0
        for d in self.digits:
            value = (value << _WORD_BITS) | d
        return value


def _key_from_index(index: int, dim: int) -> HilbertKey:
    digits = tuple(
        (index >> (_WORD_BITS * (dim - 1 - i))) & _WORD_MASK for i in range(dim)
    )
    return HilbertKey(digits)


def _axes_to_transpose(coords: list[int], levels: int) -> list[int]:
    # Skilling's in-place conversion from axes to the transposed Hilbert
    # index; one word per dimension, `levels` significant bits each.
    x = list(coords)
    n = len(x)
    m = 1 << (levels - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(n):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    for i in range(1, n):
        x[i] ^= x[i - 1]
    t = 0
    q = m
    while q > 1:
        if x[n - 1] & q:
            t ^= q - 1
        q >>= 1
    return [v ^ t for v in x]


def hilbert_index(point, levels: int) -> HilbertKey:
    """Position of a lattice point along the order-`levels` Hilbert curve.

    `point` is a tuple of 1 to 3 non-negative integers, each below
    2**levels.  The map is a bijection between the full lattice and
    {0, ..., 2**(d*levels) - 1}; keys compare lexicographically in curve
    order.
    """
    coords = [int(c) for c in point]
    dim = len(coords)
    if dim not in (1, 2, 3):
        raise DomainError(f"supported dimensions are 1..3, got {dim}")
    if levels < 1:
        raise DomainError(f"levels must be positive, got {levels}")
    bound = 1 << levels
    for c in coords:
        if c < 0 or c >= bound:
            raise DomainError(f"coordinate {c} outside [0, 2**{levels})")
    if dim == 1:
        return _key_from_index(coords[0], 1)
    words = _axes_to_transpose(coords, levels)
    index = 0
    for level in range(levels - 1, -1, -1):
        for w in words:
            index = (index << 1) | ((w >> level) & 1)
    return _key_from_index(index, dim)


def default_levels(n_items: int) -> int:
    """Quantization resolution used when no grid extent is known."""
    return max(1, ceil(log2(max(2, n_items))))


def quantize(points, box_lo, box_hi, levels: int) -> np.ndarray:
    """Map points in a closed box to the 2**levels lattice, per axis.

    Coordinates are scaled by the box extent of each axis, floor-quantized
    and clamped to the last lattice cell; degenerate axes collapse to 0.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(box_lo, dtype=float)
    hi = np.asarray(box_hi, dtype=float)
    if pts.shape[0] and (np.any(pts < lo) or np.any(pts > hi)):
        raise DomainError("point outside the bounding box")
    span = hi - lo
    n_lat = 1 << levels
    scaled = np.zeros_like(pts)
    ok = span > 0
    scaled[:, ok] = (pts[:, ok] - lo[ok]) / span[ok]
    cells = np.minimum((scaled * n_lat).astype(np.int64), n_lat - 1)
    return cells


def order_by_hilbert(points, box_lo, box_hi, levels: int | None = None) -> np.ndarray:
    """Permutation of point indices in Hilbert-curve order.

    Points are quantized onto a 2**levels lattice inside the closed box
    (see `quantize`); ties, including coincident points, keep their
    original relative order.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if levels is None:
        levels = default_levels(n)
    cells = quantize(pts, box_lo, box_hi, levels)
    keys = [hilbert_index(tuple(c), levels) for c in cells]
    order = sorted(range(n), key=lambda i: keys[i])
    return np.asarray(order, dtype=np.int64)
