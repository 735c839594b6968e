"""Brownian sheet, white noise over rectangles, and heat-smoothed white noise."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import make_rng
from .lattice import Rectangle

__all__ = [
    "SheetSample",
    "SmoothedFieldSample",
    "sample_brownian_sheet",
    "white_noise_rectangle",
    "smoothed_covariance",
    "sample_smoothed_field",
    "CovarianceFactorizationError",
]

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class CovarianceFactorizationError(np.linalg.LinAlgError):
    def __init__(self, message, grid):
        super().__init__(message)
        self.grid = grid


@dataclass
class SheetSample:
    """Brownian sheet values on a product grid; ``values[..., i_0, ..., i_{d-1}]``."""

    grid: tuple[np.ndarray, ...]
    values: np.ndarray
    rng_seed: object = None

    @property
    def d(self) -> int:
        return len(self.grid)

    def _index(self, point: Sequence[float]) -> tuple[int, ...]:
        idx = []
        for coord, axis in zip(point, self.grid):
            k = int(np.searchsorted(axis, coord))
            if k >= axis.size or not math.isclose(axis[k], coord, rel_tol=0, abs_tol=1e-12):
                raise ValueError(f"point {tuple(point)} is not on the sheet grid")
            idx.append(k)
        return tuple(idx)

    def at(self, point: Sequence[float]) -> np.ndarray | float:
        v = self.values[(..., *self._index(point))]
        return float(v) if np.ndim(v) == 0 else v


def _check_axis(axis) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    if axis.ndim != 1 or axis.size < 2:
        raise ValueError("each grid axis needs at least two coordinates")
    if np.any(np.diff(axis) <= 0):
        raise ValueError("grid coordinates must be strictly increasing")
    if not np.any(axis == 0.0):
        raise ValueError("every grid axis must contain 0")
    return axis


def sample_brownian_sheet(grid: Sequence[Sequence[float]], rng_seed, size: int | None = None) -> SheetSample:
    """Exact sample of W on a product grid.

    Each of the 2^d orthants carries an independent sheet built from Gaussian cell
    increments of variance equal to the cell volume, cumulated outward from 0.
    ``size`` draws that many independent sheets along a leading axis.
    """
    axes = tuple(_check_axis(a) for a in grid)
    d = len(axes)
    rng = make_rng(rng_seed)
    lead = () if size is None else (int(size),)
    values = np.zeros(lead + tuple(a.size for a in axes))
    zero = [int(np.flatnonzero(a == 0.0)[0]) for a in axes]
    for signs in itertools.product((-1, 1), repeat=d):
        # absolute coordinates 0 = c_0 < c_1 < ... of this orthant, per axis
        sel, widths = [], []
        for a, z, s in zip(axes, zero, signs):
            if s > 0:
                idx = np.arange(z, a.size)
            else:
                idx = np.arange(z, -1, -1)
            sel.append(idx)
            widths.append(np.diff(np.abs(a[idx])))
        if any(w.size == 0 for w in widths):
            continue
        vol = widths[0]
        for w in widths[1:]:
            vol = np.multiply.outer(vol, w)
        incr = rng.standard_normal(lead + vol.shape) * np.sqrt(vol)
        sheet = np.zeros(lead + tuple(w.size + 1 for w in widths))
        inner = sheet[(..., *[slice(1, None)] * d)]
        acc = incr
        for j in range(d):
            acc = np.cumsum(acc, axis=len(lead) + j)
        inner[...] = acc
        values[(..., *np.ix_(*sel))] = sheet
    return SheetSample(axes, values, rng_seed)


def white_noise_rectangle(sheet: SheetSample, rect: Rectangle) -> np.ndarray | float:
    """``Phi(D)`` as the signed vertex sum of the sheet, sign ``(-1)^nu``."""
    if rect.d != sheet.d:
        raise ValueError("rectangle and sheet dimensions differ")
    total = 0.0
    for z, nu in rect.vertices():
        total = total + (-1) ** nu * sheet.values[(..., *sheet._index(z))]
    return float(total) if np.ndim(total) == 0 else total


@dataclass
class SmoothedFieldSample:
    t: float
    grid: np.ndarray
    values: np.ndarray
    lam_scale: float | None = None
    jitter: float = 0.0


def _as_points(grid) -> np.ndarray:
    pts = np.asarray(grid, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or not 1 <= pts.shape[1] <= 3:
        raise ValueError("grid must be an (n,) or (n, d) array of points")
    return pts


def smoothed_covariance(grid, t: float) -> np.ndarray:
    """``C(x_i, x_j) = N_{2t}(x_i - x_j) = (4 pi t)^{-d/2} exp(-|x_i - x_j|^2 / 4t)``."""
    if t <= 0:
        raise ValueError(f"smoothing time must be positive, got {t}")
    pts = _as_points(grid)
    d = pts.shape[1]
    diff = pts[:, None, :] - pts[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    return (4 * math.pi * t) ** (-d / 2) * np.exp(-r2 / (4 * t))


def _factor(cov: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.mean(np.diag(cov)))
    for rel in JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + rel * scale * np.eye(cov.shape[0])), rel
        except np.linalg.LinAlgError:
            continue
    raise CovarianceFactorizationError(
        f"covariance of {pts.shape[0]} points not factorizable with jitter up to "
        f"{JITTER_LADDER[-1]:g}", pts
    )


def sample_smoothed_field(grid, t: float, rng_seed, size: int | None = None,
                          lam: float | None = None) -> SmoothedFieldSample:
    """Jointly Gaussian ``(Phi * N_t)(x)`` at the grid points.

    With ``lam`` the values are multiplied by ``(2 lam)^{1/2}``. ``size`` draws
    independent fields along a leading axis.
    """
    pts = _as_points(grid)
    if pts.shape[0] > 4096:
        raise ValueError("at most 4096 grid points are supported")
    chol, jitter = _factor(smoothed_covariance(pts, t), pts)
    rng = make_rng(rng_seed)
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, pts.shape[0]))
    vals = z @ chol.T
    scale = None
    if lam is not None:
        scale = math.sqrt(2 * lam)
        vals = vals * scale
    if size is None:
        vals = vals[0]
    return SmoothedFieldSample(float(t), pts, vals, scale, jitter)
