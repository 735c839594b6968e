import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import kstest, norm

from abreact.gaussian import (
    CovarianceFactorizationError,
    _factor,
    sample_brownian_sheet,
    sample_smoothed_field,
    smoothed_covariance,
    white_noise_rectangle,
)
from abreact.lattice import Rectangle

GRID2 = [[-1.0, 0.0, 1.0, 2.0], [-1.0, 0.0, 1.0, 2.0]]


@pytest.fixture(scope="module")
def sheets():
    return sample_brownian_sheet(GRID2, 101, size=100_000)


def test_sheet_vanishes_on_axes(sheets):
    v = sheets.values
    assert np.all(v[:, 1, :] == 0.0) and np.all(v[:, :, 1] == 0.0)


def test_sheet_covariances(sheets):
    n = sheets.values.shape[0]
    w11 = sheets.at((1.0, 1.0))
    assert abs(np.var(w11, ddof=1) - 1.0) <= 3 * math.sqrt(2 / n)
    x, y = sheets.at((1.0, 2.0)), sheets.at((2.0, 1.0))
    cov = np.mean(x * y) - x.mean() * y.mean()
    # Var(xy) = Var x Var y + cov^2 = 2 * 2 + 1
    assert abs(cov - 1.0) <= 3 * math.sqrt(5 / n)
    # opposite orthants are independent
    z = sheets.at((-1.0, -1.0))
    assert abs(np.mean(w11 * z)) <= 3 * math.sqrt(1 / n)


def test_disjoint_cell_increments_uncorrelated(sheets):
    n = sheets.values.shape[0]
    cells = [Rectangle((0.0, 0.0), (1.0, 1.0)), Rectangle((1.0, 0.0), (2.0, 1.0)),
             Rectangle((-1.0, 0.0), (0.0, 1.0)), Rectangle((0.0, -1.0), (1.0, 0.0))]
    vals = [white_noise_rectangle(sheets, c) for c in cells]
    for i in range(4):
        for j in range(i + 1, 4):
            assert abs(np.mean(vals[i] * vals[j])) <= 3 / math.sqrt(n)


def test_white_noise_identities(sheets):
    d = Rectangle((0.0, 0.0), (2.0, 1.0))
    np.testing.assert_array_equal(white_noise_rectangle(sheets, d), sheets.at((2.0, 1.0)))
    left = Rectangle((-1.0, 0.0), (1.0, 2.0))
    right = Rectangle((1.0, 0.0), (2.0, 2.0))
    union = Rectangle((-1.0, 0.0), (2.0, 2.0))
    np.testing.assert_allclose(white_noise_rectangle(sheets, left) + white_noise_rectangle(sheets, right),
                               white_noise_rectangle(sheets, union), atol=1e-12)


def test_white_noise_variance_and_overlap(sheets):
    n = sheets.values.shape[0]
    d1 = Rectangle((-1.0, -1.0), (1.0, 1.0))
    d2 = Rectangle((0.0, -1.0), (2.0, 2.0))
    p1, p2 = white_noise_rectangle(sheets, d1), white_noise_rectangle(sheets, d2)
    assert abs(np.var(p1, ddof=1) - 4.0) <= 3 * 4.0 * math.sqrt(2 / n)
    overlap = d1.intersection_volume(d2)
    assert overlap == 2.0
    assert abs(np.mean(p1 * p2) - overlap) <= 3 * math.sqrt((4 * 6 + overlap ** 2) / n)


def test_sheet_grid_validation():
    with pytest.raises(ValueError):
        sample_brownian_sheet([[1.0, 2.0]], 0)
    with pytest.raises(ValueError):
        sample_brownian_sheet([[0.0, 2.0, 1.0]], 0)
    s = sample_brownian_sheet([[0.0, 1.0]], 0)
    with pytest.raises(ValueError):
        s.at((0.5,))


def test_smoothed_covariance_entries():
    c = smoothed_covariance([0.0, 2.0], 1.0)
    assert c[0, 0] == pytest.approx(0.28209479177387814)
    assert c[0, 1] == pytest.approx(0.28209479177387814 * math.exp(-1.0))
    assert c[0, 1] == pytest.approx(0.10378, abs=1e-5)
    # the convolution identity int N_t(x1 - y) N_t(x2 - y) dy = N_2t(x1 - x2), by quadrature
    n1 = lambda y: math.exp(-y * y / 2) / math.sqrt(2 * math.pi)
    val, _ = integrate.quad(lambda y: n1(0.0 - y) * n1(2.0 - y), -np.inf, np.inf)
    assert val == pytest.approx(c[0, 1], rel=1e-9)


def test_smoothed_field_statistics():
    pts = np.linspace(0.0, 3.75, 16)
    n = 10_000
    s = sample_smoothed_field(pts, 1.0, 5, size=n)
    cov = np.cov(s.values, rowvar=False)
    exact = smoothed_covariance(pts, 1.0)
    se = np.sqrt((np.outer(np.diag(exact), np.diag(exact)) + exact ** 2) / n)
    assert np.all(np.abs(cov - exact) <= 3.5 * se)
    assert kstest(s.values[:, 3], norm(scale=math.sqrt(exact[3, 3])).cdf).pvalue > 0.01
    assert np.all(np.abs(s.values.mean(axis=0)) <= 4 * np.sqrt(np.diag(exact) / n))


def test_smoothed_field_lambda_scale_and_2d():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
    s = sample_smoothed_field(pts, 2.0, 1, size=20_000, lam=2.0)
    assert s.lam_scale == pytest.approx(2.0)
    var = np.var(s.values[:, 0])
    assert var == pytest.approx(4 * (8 * math.pi) ** -1, rel=0.05)


def test_smoothed_field_is_reproducible():
    a = sample_smoothed_field([0.0, 1.0], 1.0, 9, size=3).values
    b = sample_smoothed_field([0.0, 1.0], 1.0, 9, size=3).values
    assert np.array_equal(a, b)


def test_jitter_ladder_and_failure():
    # duplicate points make the covariance singular; the ladder absorbs it
    s = sample_smoothed_field([0.0, 0.0, 1.0], 1.0, 0, size=2)
    assert s.jitter > 0
    # an indefinite matrix is beyond any admissible jitter and must be reported
    pts = np.array([[0.0], [1.0]])
    with pytest.raises(CovarianceFactorizationError) as err:
        _factor(np.array([[1.0, 2.0], [2.0, 1.0]]), pts)
    assert err.value.grid is pts
    with pytest.raises(ValueError):
        sample_smoothed_field(np.zeros(5000), 1.0, 0)
    with pytest.raises(ValueError):
        sample_smoothed_field([0.0], 0.0, 0)
