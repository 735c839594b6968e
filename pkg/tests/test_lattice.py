import itertools

import numpy as np
import pytest

from abreact.lattice import (
    Lattice,
    OccupancyField,
    Rectangle,
    block_counts,
    scaled_block,
    tile_boxes,
)


@pytest.mark.parametrize("sides", [(2,), (7,), (3, 4), (2, 3, 5)])
def test_encode_decode_bijection(sides):
    lat = Lattice(sides)
    idx = np.arange(lat.n_sites)
    coords = lat.decode(idx)
    assert np.array_equal(lat.encode(coords), idx)
    # every coordinate tuple appears exactly once
    seen = {tuple(c) for c in coords.tolist()}
    assert seen == set(itertools.product(*[range(s) for s in sides]))


def test_encode_wraps():
    lat = Lattice((5, 4))
    assert lat.encode((-1, 0)) == lat.encode((4, 0))
    assert lat.encode((5, 9)) == lat.encode((0, 1))


@pytest.mark.parametrize("bad", [(), (1,), (4, 1), (2, 2, 2, 2)])
def test_lattice_rejects_bad_shapes(bad):
    with pytest.raises(ValueError):
        Lattice(bad)


def test_neighbors_order_and_wrap():
    lat = Lattice((4, 3))
    # site (0, 0): -e0 -> (3, 0), +e0 -> (1, 0), -e1 -> (0, 2), +e1 -> (0, 1)
    assert lat.neighbors(0) == [lat.encode((3, 0)), lat.encode((1, 0)),
                                lat.encode((0, 2)), lat.encode((0, 1))]


def test_rectangle_half_open_convention():
    r = Rectangle((0.0,), (3.0,))
    assert list(r.lattice_ranges()[0]) == [1, 2, 3]
    r = Rectangle((-0.5,), (2.5,))
    assert list(r.lattice_ranges()[0]) == [0, 1, 2]
    assert Rectangle((0.2, 0.0), (1.2, 2.0)).site_count() == 2
    with pytest.raises(ValueError):
        Rectangle((1.0,), (1.0,))


def test_rectangle_vertices_signs():
    r = Rectangle((0.0, 1.0), (2.0, 3.0))
    verts = dict(r.vertices())
    assert verts[(0.0, 1.0)] == 2
    assert verts[(2.0, 3.0)] == 0
    assert verts[(2.0, 1.0)] == 1


def test_block_counts_examples():
    lat = Lattice((10,))
    empty = OccupancyField.empty(lat)
    assert tuple(block_counts(empty, Rectangle((0.0,), (5.0,)))) == (0, 0, 0, 0)
    f = OccupancyField.from_counts(lat, {1: (3, 0), 2: (0, 2)})
    assert tuple(block_counts(f, Rectangle((0.0,), (2.0,)))) == (3, 2, -1, 2)
    g = OccupancyField.from_counts(lat, {4: (0, 5)})
    assert tuple(block_counts(g, Rectangle((3.0,), (4.0,)))) == (0, 5, 5, 0)


def test_block_counts_wraps_and_rejects_overlap():
    lat = Lattice((6,))
    f = OccupancyField.from_counts(lat, {0: (1, 0), 5: (0, 1)})
    bc = block_counts(f, Rectangle((-2.0,), (0.0,)))  # sites -1 -> 5 and 0
    assert (bc.a, bc.b) == (1, 1)
    with pytest.raises(ValueError):
        block_counts(f, Rectangle((0.0,), (7.0,)))


def test_block_counts_additivity_random():
    rng = np.random.default_rng(3)
    lat = Lattice((12, 9))
    f = OccupancyField.from_signed(lat, rng.integers(-3, 4, lat.n_sites))
    left = Rectangle((-0.5, 1.0), (4.0, 7.0))
    right = Rectangle((4.0, 1.0), (9.5, 7.0))
    union = Rectangle((-0.5, 1.0), (9.5, 7.0))
    a, b, u = block_counts(f, left), block_counts(f, right), block_counts(f, union)
    assert (a.a + b.a, a.b + b.b, a.signed + b.signed) == (u.a, u.b, u.signed)


def test_exclusive_parts_match_signed_view():
    rng = np.random.default_rng(5)
    lat = Lattice((8, 8))
    for _ in range(20):
        s = rng.integers(-4, 5, lat.n_sites)
        f = OccupancyField.from_signed(lat, s)
        assert f.is_exclusive()
        rect = Rectangle(tuple(rng.uniform(-3, 0, 2)), tuple(rng.uniform(2, 4.9, 2)))
        bc = block_counts(f, rect)
        ix = np.ix_(*[np.mod(np.arange(r.start, r.stop), 8) for r in rect.lattice_ranges()])
        grid = s.reshape(8, 8)[ix]
        assert bc.a == np.maximum(-grid, 0).sum()
        assert bc.b == np.maximum(grid, 0).sum()
        assert bc.minority <= bc.total / 2


def test_scaled_block_examples():
    lat = Lattice((64,))
    f = OccupancyField.from_counts(lat, {1: (0, 4), 3: (0, 2)})
    rect = Rectangle((0.0,), (1.0,))
    assert scaled_block(f, rect, 16) == pytest.approx(6 / 16 ** 0.25)
    assert scaled_block(f, Rectangle((0.0,), (4.0,)), 1) == block_counts(f, Rectangle((0.0,), (4.0,))).signed
    lat2 = Lattice((16, 16))
    g = OccupancyField.from_counts(lat2, {lat2.encode((1, 1)): (0, 8)})
    # d=2: T^{d/4} = 16^{1/2} = 4, so a signed count of 8 rescales to 2
    assert scaled_block(g, Rectangle((0.0, 0.0), (1.0, 1.0)), 16) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        scaled_block(f, rect, 0.5)
    with pytest.raises(ValueError):
        scaled_block(f, rect, 100 ** 2)


def test_totals_cached_and_invariants():
    lat = Lattice((5,))
    f = OccupancyField.from_counts(lat, {0: (2, 0), 3: (0, 1)})
    assert f.totals == (2, 1)
    f.a[1] = 1
    with pytest.raises(AssertionError):
        f.check_invariants()
    f.refresh_totals()
    f.check_invariants()
    f.b[1] = 1
    f.refresh_totals()
    with pytest.raises(AssertionError):
        f.check_invariants(exclusive=True)
    with pytest.raises(ValueError):
        OccupancyField(lat, -np.ones(5), np.zeros(5))


def test_csv_round_trip():
    lat = Lattice((3, 2))
    f = OccupancyField.from_counts(lat, {0: (1, 0), 5: (0, 3)})
    text = f.to_csv()
    assert text.splitlines()[0] == "site,x0,x1,a,b"
    assert text.splitlines()[6] == "5,2,1,0,3"
    assert OccupancyField.from_csv(lat, text) == f


def test_tile_boxes_cover_torus():
    lat = Lattice((8, 6))
    f = OccupancyField(lat, np.ones(48), np.zeros(48))
    boxes = list(tile_boxes(lat, 2))
    assert len(boxes) == 12
    assert sum(block_counts(f, b).a for b in boxes) == 48
