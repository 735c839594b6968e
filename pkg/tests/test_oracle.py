import math

import numpy as np
import pytest
from scipy.linalg import expm

from abreact.dynamics import InteractionMode
from abreact.kernels import walk_kernel_1d
from abreact.lattice import Lattice, OccupancyField
from abreact.oracle import (
    StateSpaceOverflow,
    build_generator,
    marginal_table,
    oracle_marginal,
    transient_distribution,
)

TWO = InteractionMode.TWO_TYPE_ANNIHILATE


def pair(side, i=0, j=1):
    lat = Lattice((side,))
    return OccupancyField.from_counts(lat, {i: (1, 0), j: (0, 1)})


def test_pair_on_two_sites_has_three_states():
    ab = pair(2, 0, 1)
    ba = OccupancyField.from_counts(Lattice((2,)), {0: (0, 1), 1: (1, 0)})
    gen = build_generator([ab, ba], TWO)
    assert gen.n_states == 3
    empty = gen.index[((0, 0), (0, 0))]
    assert gen.exit_rates()[empty] == 0.0
    # both directions lead onto the partner: total rate 2 per state
    assert gen.exit_rates()[gen.index[((1, 0), (0, 1))]] == pytest.approx(2.0)


def test_free_single_walker_is_circulant():
    lat = Lattice((4,))
    gen = build_generator(OccupancyField.from_counts(lat, {0: (0, 1)}), InteractionMode.FREE)
    assert gen.n_states == 4
    q = gen.dense()
    off = q - np.diag(np.diag(q))
    assert set(np.unique(off)) == {0.0, 0.5}
    assert np.allclose(off.sum(axis=1), 1.0)


@pytest.mark.parametrize("mode", list(InteractionMode))
def test_row_sums_zero_and_rates_nonnegative(mode):
    lat = Lattice((3, 2))
    if mode is TWO:
        f = OccupancyField.from_counts(lat, {0: (1, 0), 3: (0, 1), 4: (0, 1)})
    elif mode is InteractionMode.FREE:
        f = OccupancyField.from_counts(lat, {0: (1, 0), 3: (0, 1)})
    else:
        f = OccupancyField.from_counts(lat, {0: (0, 1), 1: (0, 1), 5: (0, 1)})
    gen = build_generator(f, mode)
    assert np.max(np.abs(gen.row_sums())) <= 1e-12
    q = gen.dense()
    assert np.all(q - np.diag(np.diag(q)) >= 0)


def test_overflow_rejected():
    lat = Lattice((6, 6))
    f = OccupancyField.from_counts(lat, {i: (0, 1) for i in range(5)})
    with pytest.raises(StateSpaceOverflow):
        build_generator(f, InteractionMode.FREE, max_states=100)


def test_transient_t0_exact():
    gen = build_generator(pair(4), TWO)
    p0 = gen.point_mass(pair(4))
    assert np.array_equal(transient_distribution(gen, p0, 0.0), p0)


def test_pair_on_two_sites_annihilation_law():
    gen = build_generator(pair(2), TWO)
    p = transient_distribution(gen, gen.point_mass(pair(2)), 0.5)
    empty = gen.index[((0, 0), (0, 0))]
    assert p[empty] == pytest.approx(1 - math.exp(-1.0), abs=1e-10)
    assert p[empty] == pytest.approx(0.632121, abs=1e-6)


def test_pair_on_three_sites_survival():
    gen = build_generator(pair(3), TWO)
    p = transient_distribution(gen, gen.point_mass(pair(3)), 1.0)
    surv = 1 - p[gen.index[((0, 0),) * 3]]
    assert surv == pytest.approx(math.exp(-1.0), abs=1e-9)
    assert surv == pytest.approx(0.367879, abs=1e-6)


def test_symmetric_start_marginal():
    ab = pair(2, 0, 1)
    ba = OccupancyField.from_counts(Lattice((2,)), {0: (0, 1), 1: (1, 0)})
    gen = build_generator([ab, ba], TWO)
    p0 = 0.5 * gen.point_mass(ab) + 0.5 * gen.point_mass(ba)
    p = transient_distribution(gen, p0, 0.5)
    assert oracle_marginal(gen, p, 0, "b") == pytest.approx(0.5 * math.exp(-1.0), abs=1e-10)
    empty_only = np.zeros(gen.n_states)
    empty_only[gen.index[((0, 0), (0, 0))]] = 1.0
    assert oracle_marginal(gen, empty_only, 0, "a") == 0.0


def test_free_walker_marginal_equals_wrapped_kernel():
    lat = Lattice((4,))
    start = OccupancyField.from_counts(lat, {0: (0, 1)})
    gen = build_generator(start, InteractionMode.FREE)
    t = 1.7
    p = transient_distribution(gen, gen.point_mass(start), t)
    for x in range(4):
        wrapped = sum(walk_kernel_1d(x + 4 * k, t) for k in range(-20, 21))
        assert oracle_marginal(gen, p, x, "b") == pytest.approx(wrapped, abs=1e-9)


def test_uniformization_matches_expm_and_truncation_bound():
    lat = Lattice((4,))
    f = OccupancyField.from_counts(lat, {0: (1, 0), 1: (1, 0), 2: (0, 1)})
    gen = build_generator(f, TWO)
    p0 = gen.point_mass(f)
    for t in (0.25, 1.0, 2.0):
        p = transient_distribution(gen, p0, t)
        assert abs(p.sum() - 1.0) <= 1e-9
        ref = p0 @ expm(t * gen.dense())
        assert np.abs(p - ref).sum() <= 1e-9
        more = transient_distribution(gen, p0, t, extra_terms=10)
        assert np.abs(more - p).sum() < 1e-10


def test_marginal_table_shapes():
    gen = build_generator(pair(4), TWO)
    p = transient_distribution(gen, gen.point_mass(pair(4)), 1.0)
    mean, var = marginal_table(gen, p)
    assert mean.shape == var.shape == (4, 2)
    assert np.all(var >= -1e-15)
    assert mean[:, 0].sum() == pytest.approx(mean[:, 1].sum())


def test_transient_rejects_bad_input():
    gen = build_generator(pair(2), TWO)
    with pytest.raises(ValueError):
        transient_distribution(gen, gen.point_mass(pair(2)), -1.0)
    with pytest.raises(ValueError):
        transient_distribution(gen, np.ones(gen.n_states), 1.0)
