import math

import numpy as np
import pytest
from scipy.special import ive

from abreact.kernels import (
    KernelTable,
    convolve_field,
    kernel_gap_scan,
    normal_kernel,
    normal_table,
    scaled_bessel_row,
    walk_kernel,
    walk_kernel_1d,
    walk_table,
)
from abreact.lattice import Lattice, OccupancyField


def bessel_series(n, t, terms=200):
    """exp(-t) I_n(t) from the power series in log space (independent oracle)."""
    n = abs(n)
    logs = [(2 * k + n) * math.log(t / 2) - math.lgamma(k + 1) - math.lgamma(k + n + 1) - t
            for k in range(terms)]
    return math.fsum(math.exp(v) for v in logs)


def test_walk_kernel_1d_examples():
    assert walk_kernel_1d(0, 0.0) == 1.0
    assert walk_kernel_1d(3, 0.0) == 0.0
    assert walk_kernel_1d(1, 1.0) == pytest.approx(0.20791041534970845, rel=1e-13)
    assert walk_kernel_1d(-3, 2.0) == walk_kernel_1d(3, 2.0)
    with pytest.raises(ValueError):
        walk_kernel_1d(0, -1.0)


@pytest.mark.parametrize("t", [0.1, 1.0, 7.5, 29.9, 30.1, 64.0, 200.0])
def test_bessel_row_matches_series_oracle(t):
    row = scaled_bessel_row(t, 40)
    for n in (0, 1, 2, 5, 17, 40):
        expect = bessel_series(n, t)
        assert row[n] == pytest.approx(expect, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("t", [1e3, 1e4, 1e5, 1e6])
def test_bessel_row_large_t(t):
    n = np.array([0, 1, 10, int(math.sqrt(t)), int(3 * math.sqrt(t))])
    row = scaled_bessel_row(t, int(n.max()))
    np.testing.assert_allclose(row[n], ive(n, t), rtol=1e-11)


def test_walk_kernel_product():
    assert walk_kernel((0, 0), 0.0) == 1.0
    expect = bessel_series(1, 1.0) * bessel_series(0, 1.0)
    assert walk_kernel((1, 0), 1.0) == pytest.approx(expect, rel=1e-13)
    assert walk_kernel((1, 0), 1.0) == pytest.approx(0.09684, abs=5e-6)


def test_normal_kernel_examples():
    assert normal_kernel([0.0], 1.0) == pytest.approx(0.3989422804014327)
    assert normal_kernel([0.0, 0.0], 1.0) == pytest.approx(0.15915494309189535)
    assert normal_kernel([1.0], 1.0) == pytest.approx(0.24197072451914337)
    with pytest.raises(ValueError):
        normal_kernel([0.0], 0.0)


@pytest.mark.parametrize("t", [1.0, 4.0, 16.0, 64.0, 256.0])
@pytest.mark.parametrize("d", [1, 2])
def test_walk_table_normalization(t, d):
    tab = walk_table(t, d)
    assert tab.tail_mass < 1e-12
    assert tab.total() + tab.tail_mass == pytest.approx(1.0, abs=1e-12)
    assert np.all(tab.values >= 0)
    assert np.array_equal(tab.values, np.flip(tab.values, axis=0))


@pytest.mark.parametrize("t", [1.0, 16.0, 64.0, 256.0])
def test_walk_table_coordinate_variance(t):
    tab = walk_table(t, 1, threshold=1e-15)
    assert abs(tab.coordinate_variance() - t) <= 1e-8


def test_chapman_kolmogorov():
    k1 = walk_table(1.0, 1, threshold=1e-16).values
    k3 = walk_table(3.0, 1, threshold=1e-16).values
    both = np.convolve(k1, k3)
    r = (both.size - 1) // 2
    for x in range(-8, 9):
        assert abs(both[x + r] - walk_kernel_1d(x, 4.0)) <= 1e-10


def test_normal_table_sums_to_one_on_lattice():
    tab = normal_table(16.0, 1)
    assert abs(tab.total() - 1.0) <= 1e-9
    assert tab.tail_mass < 1e-12


def test_kernel_csv_dump():
    tab = walk_table(0.5, 1, radius=2)
    lines = tab.to_csv().splitlines()
    assert lines[0] == "offset_0,value"
    assert len(lines) == 6
    assert lines[3].startswith("0,")
    assert float(lines[3].split(",")[1]) == pytest.approx(walk_kernel_1d(0, 0.5))


def test_convolve_delta_constant_linearity():
    lat = Lattice((40,))
    tab = walk_table(4.0, 1)
    delta = OccupancyField.from_counts(lat, {0: (0, 1)})
    out = convolve_field(delta, tab).values
    for x in range(-tab.radius[0], tab.radius[0] + 1):
        assert out[x % 40] == pytest.approx(tab.value_at((x,)), abs=1e-300)
    const = convolve_field(np.full(40, 3.0), tab, lattice=lat).values
    np.testing.assert_allclose(const, 3.0 * tab.total(), rtol=1e-14)
    assert abs(const[0] - 3.0) <= 3.0 * tab.tail_mass + 1e-14
    rng = np.random.default_rng(0)
    f = rng.integers(-2, 3, 40)
    g = rng.integers(-2, 3, 40)
    lhs = convolve_field(f + g, tab, lattice=lat).values
    rhs = convolve_field(f, tab, lattice=lat).values + convolve_field(g, tab, lattice=lat).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_convolve_2d_delta():
    lat = Lattice((32, 32))
    tab = walk_table(2.0, 2)
    f = OccupancyField.from_counts(lat, {lat.encode((0, 0)): (1, 0)})
    out = convolve_field(f, tab).values
    assert out[1, 2] == pytest.approx(-walk_kernel((1, 2), 2.0), rel=1e-12)
    assert out[31, 0] == pytest.approx(-walk_kernel((1, 0), 2.0), rel=1e-12)


def test_convolve_rejects_wide_kernel():
    lat = Lattice((10,))
    with pytest.raises(ValueError):
        convolve_field(OccupancyField.empty(lat), walk_table(16.0, 1))


def test_horizon_zero_is_identity():
    tab = walk_table(0.0, 1)
    lat = Lattice((8,))
    f = OccupancyField.from_signed(lat, [1, -2, 0, 3, 0, 0, -1, 0])
    np.testing.assert_array_equal(convolve_field(f, tab).values, f.signed())


def test_gap_scan_rates_d1():
    rows = kernel_gap_scan([16.0, 64.0, 256.0])
    for r in rows:
        assert r.sup >= 0 and r.l1 >= 0 and r.l2 >= 0
        assert all(math.isfinite(v) for v in (r.sup, r.l1, r.l2))
    sup = [r.sup for r in rows]
    l1 = [r.l1 for r in rows]
    # within a factor of two of the bound rates 4^-1 and 4^-1/2 (one-sided)
    assert sup[1] / sup[0] <= 2 * 0.25 and sup[2] / sup[1] <= 2 * 0.25
    assert l1[1] / l1[0] <= 2 * 0.5
    assert all(np.diff(sup) < 0) and all(np.diff(l1) < 0)
    with pytest.raises(ValueError):
        kernel_gap_scan([2.0])


def test_off_by_one_stencil_breaks_variance():
    good = walk_table(16.0, 1, threshold=1e-15)
    shifted = KernelTable("walk", 16.0, good.radius, np.roll(good.values, 1), good.tail_mass)
    assert abs(shifted.coordinate_variance() - 16.0) > 0.5
