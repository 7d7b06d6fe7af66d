import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcsrmv.errors import DomainError
from bcsrmv.hilbert import HilbertKey, default_levels, hilbert_index, order_by_hilbert


def full_grid(dim, levels):
    n = 1 << levels
    if dim == 1:
        return [(i,) for i in range(n)]
    if dim == 2:
        return [(i, j) for i in range(n) for j in range(n)]
    return [(i, j, k) for i in range(n) for j in range(n) for k in range(n)]


def brute_force_order1_2d():
    # recursive construction of the order-1 template: starting at the
    # origin, walk the second axis first, then step along the first
    return [(0, 0), (0, 1), (1, 1), (1, 0)]


def test_1d_is_identity():
    assert hilbert_index((5,), 3).index == 5
    for i in range(8):
        assert hilbert_index((i,), 3).index == i


def test_2d_order1_visit_order():
    expected = brute_force_order1_2d()
    keys = [hilbert_index(p, 1).index for p in expected]
    assert keys == [0, 1, 2, 3]


def test_3d_levels2_bijection():
    keys = [hilbert_index(p, 2).index for p in full_grid(3, 2)]
    assert sorted(keys) == list(range(64))


@pytest.mark.parametrize("dim", [1, 2, 3])
@pytest.mark.parametrize("levels", [1, 2, 3, 4, 5])
def test_bijectivity_and_locality(dim, levels):
    if dim == 3 and levels > 4:
        pts = full_grid(dim, levels)  # 2^15 points, still fast enough
    else:
        pts = full_grid(dim, levels)
    keys = [hilbert_index(p, levels) for p in pts]
    index_set = {k.index for k in keys}
    assert len(index_set) == len(pts)
    assert min(index_set) == 0 and max(index_set) == len(pts) - 1
    order = sorted(range(len(pts)), key=lambda i: keys[i])
    for a, b in zip(order, order[1:]):
        manhattan = sum(abs(x - y) for x, y in zip(pts[a], pts[b]))
        assert manhattan == 1


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("levels", [2, 3])
def test_nesting(dim, levels):
    # the parent cell of a point on the refined curve is the point's cell
    # on the coarser curve: coarse index == fine index >> dim
    for p in full_grid(dim, levels):
        fine = hilbert_index(p, levels).index
        coarse = hilbert_index(tuple(c >> 1 for c in p), levels - 1).index
        assert fine >> dim == coarse


def test_key_comparability_matches_index():
    pts = full_grid(2, 3)
    keys = [hilbert_index(p, 3) for p in pts]
    by_key = sorted(pts, key=lambda p: hilbert_index(p, 3))
    by_index = sorted(pts, key=lambda p: hilbert_index(p, 3).index)
    assert by_key == by_index
    assert all(isinstance(k, HilbertKey) for k in keys)


def test_out_of_range_coordinate():
    with pytest.raises(DomainError):
        hilbert_index((4, 0), 2)
    with pytest.raises(DomainError):
        hilbert_index((-1,), 2)
    with pytest.raises(DomainError):
        hilbert_index((0, 0, 0, 0), 2)


@given(
    st.integers(min_value=1, max_value=3),
    st.integers(min_value=1, max_value=6),
    st.data(),
)
@settings(max_examples=60, deadline=None)
def test_random_points_in_range(dim, levels, data):
    bound = 1 << levels
    p = tuple(
        data.draw(st.integers(min_value=0, max_value=bound - 1)) for _ in range(dim)
    )
    key = hilbert_index(p, levels)
    assert 0 <= key.index < bound**dim


def test_order_single_point():
    perm = order_by_hilbert([[0.3, 0.4, 0.5]], (0, 0, 0), (1, 1, 1))
    assert perm.tolist() == [0]


def test_order_stable_ties():
    pts = [[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]
    perm = order_by_hilbert(pts, (0, 0, 0), (1, 1, 1))
    assert perm.tolist() == [0, 1]


def test_order_empty():
    assert order_by_hilbert(np.zeros((0, 3)), (0, 0, 0), (1, 1, 1)).size == 0


def test_order_outside_box():
    with pytest.raises(DomainError):
        order_by_hilbert([[1.5, 0.0]], (0, 0), (1, 1))


def test_order_4x4_grid_face_adjacent():
    centers = [((i + 0.5) / 4.0, (j + 0.5) / 4.0) for i in range(4) for j in range(4)]
    perm = order_by_hilbert(centers, (0.0, 0.0), (1.0, 1.0), levels=2)
    cells = [centers[i] for i in perm]
    for a, b in zip(cells, cells[1:]):
        manhattan = abs(a[0] - b[0]) + abs(a[1] - b[1])
        assert manhattan == pytest.approx(0.25)


def test_default_levels():
    assert default_levels(1) == 1
    assert default_levels(16) == 4
    assert default_levels(17) == 5
