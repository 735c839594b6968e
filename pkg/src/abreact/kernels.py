"""Lattice heat kernel of the continuous-time walk, the normal kernel, and lattice convolutions.

Each coordinate of the rate-d walk moves +-1 at rate 1/2 each, so the one-coordinate
transition probability is ``exp(-t) I_n(t)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numba
import numpy as np
from scipy import ndimage
from scipy.special import erfc

from .lattice import Lattice, OccupancyField

__all__ = [
    "scaled_bessel_row",
    "walk_kernel_1d",
    "walk_kernel",
    "normal_kernel",
    "KernelTable",
    "walk_table",
    "normal_table",
    "RealField",
    "convolve_field",
    "GapRow",
    "kernel_gap_scan",
]

SERIES_MAX_T = 30.0
DEFAULT_THRESHOLD = 1e-12


def _series_row(t: float, nmax: int) -> np.ndarray:
    # exp(-t) I_n(t) = sum_k exp(-t) (t/2)^(2k+n) / (k! (k+n)!); all terms positive.
    n = np.arange(nmax + 1, dtype=np.float64)
    half = 0.5 * t
    with np.errstate(divide="ignore"):
        logfirst = n * math.log(half) - np.array([math.lgamma(v + 1) for v in n]) - t
    term = np.exp(logfirst)
    total = term.copy()
    q = half * half
    k = 0
    while True:
        term = term * q / ((k + 1) * (k + 1 + n))
        total += term
        k += 1
        if np.all(term <= 1e-17 * total) or k > 500:
            break
    return total


@numba.njit(cache=True)
def _miller_row(t, nmax, nstart):
    # backward recurrence I_{k-1} = I_{k+1} + (2k/t) I_k, normalised by I_0 + 2 sum I_k = e^t
    out = np.zeros(nmax + 1)
    f_next = 0.0
    f = 1e-300
    norm = 0.0
    for k in range(nstart, 0, -1):
        f_prev = f_next + (2.0 * k / t) * f
        f_next = f
        f = f_prev
        # f now holds I_{k-1}
        if k - 1 <= nmax:
            out[k - 1] = f
        if k - 1 >= 1:
            norm += 2.0 * f
        else:
            norm += f
        if f > 1e250:
            f *= 1e-250
            f_next *= 1e-250
            norm *= 1e-250
            for j in range(k - 1, nmax + 1):
                out[j] *= 1e-250
    # the first step assigned I_{nstart} implicitly; the tail beyond is negligible by choice of nstart
    for j in range(nmax + 1):
        out[j] /= norm
    return out


def scaled_bessel_row(t: float, nmax: int) -> np.ndarray:
    """``exp(-t) I_n(t)`` for ``n = 0..nmax``."""
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    nmax = int(nmax)
    if t == 0:
        row = np.zeros(nmax + 1)
        row[0] = 1.0
        return row
    if t <= SERIES_MAX_T:
        return _series_row(float(t), nmax)
    nstart = int(max(nmax, 0) + 40.0 * math.sqrt(t) + 40)
    return _miller_row(float(t), nmax, nstart)


def walk_kernel_1d(n: int, t: float) -> float:
    """Probability that a single coordinate is displaced by ``n`` after time ``t``."""
    return float(scaled_bessel_row(t, abs(int(n)))[abs(int(n))])


def walk_kernel(x: Sequence[int], t: float) -> float:
    """``K_t(x)``: product of the per-coordinate Bessel probabilities."""
    x = [abs(int(v)) for v in x]
    row = scaled_bessel_row(t, max(x))
    return float(np.prod(row[x]))


def normal_kernel(x, t: float) -> float | np.ndarray:
    """``N_t(x) = (2 pi t)^{-d/2} exp(-|x|^2 / 2t)``; ``x`` has trailing dimension d."""
    if t <= 0:
        raise ValueError(f"normal kernel needs t > 0, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    val = (2 * math.pi * t) ** (-d / 2) * np.exp(-r2 / (2 * t))
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True)
class KernelTable:
    """Tabulated kernel on offsets ``[-r, r]^d`` (array index ``offset + r``)."""

    kind: Literal["walk", "normal"]
    t: float
    radius: tuple[int, ...]
    values: np.ndarray
    tail_mass: float

    @property
    def d(self) -> int:
        return len(self.radius)

    def value_at(self, offset: Sequence[int]) -> float:
        if any(abs(o) > r for o, r in zip(offset, self.radius)):
            return 0.0
        return float(self.values[tuple(o + r for o, r in zip(offset, self.radius))])

    def offsets(self) -> list[np.ndarray]:
        return [np.arange(-r, r + 1) for r in self.radius]

    def total(self) -> float:
        return float(self.values.sum())

    def coordinate_variance(self, axis: int = 0) -> float:
        other = tuple(j for j in range(self.d) if j != axis)
        marginal = self.values.sum(axis=other) if other else self.values
        n = self.offsets()[axis].astype(np.float64)
        return float(np.sum(n * n * marginal))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*[f"offset_{j}" for j in range(self.d)], "value"])
        for idx in np.ndindex(*self.values.shape):
            off = [i - r for i, r in zip(idx, self.radius)]
            w.writerow([*off, repr(float(self.values[idx]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _outer_power(row: np.ndarray, d: int) -> np.ndarray:
    out = row
    for _ in range(d - 1):
        out = np.multiply.outer(out, row)
    return out


def _walk_radius(t: float, d: int, threshold: float) -> tuple[int, np.ndarray, float]:
    """Smallest radius with total d-dim tail below threshold; returns (r, 1-d row, 1-d tail)."""
    if t == 0:
        return 0, np.ones(1), 0.0
    guess = int(40 * math.sqrt(t) + 40)
    full = scaled_bessel_row(t, guess)
    # two-sided tail beyond r, summed from the far end to avoid cancellation
    suffix = np.cumsum(full[::-1])[::-1]
    tails = 2.0 * np.append(suffix[1:], 0.0)
    ok = np.flatnonzero(-np.expm1(d * np.log1p(-tails)) < threshold)
    r = int(ok[0])
    row = np.concatenate([full[r:0:-1], full[: r + 1]])
    return r, row, float(tails[r])


def walk_table(t: float, d: int = 1, threshold: float = DEFAULT_THRESHOLD,
               radius: int | None = None) -> KernelTable:
    """Tabulate ``K_t`` on the smallest window whose tail mass is below ``threshold``."""
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    if radius is None:
        r, row, tail1 = _walk_radius(t, d, threshold)
    else:
        r = int(radius)
        half = scaled_bessel_row(t, r)
        row = np.concatenate([half[r:0:-1], half])
        far = scaled_bessel_row(t, int(r + 40 * math.sqrt(t) + 40)) if t > 0 else np.ones(1)
        tail1 = float(2.0 * far[r + 1:].sum())
    tail = float(-np.expm1(d * np.log1p(-tail1)))
    return KernelTable("walk", float(t), (r,) * d, _outer_power(row, d), tail)


def normal_table(t: float, d: int = 1, threshold: float = DEFAULT_THRESHOLD,
                 radius: int | None = None) -> KernelTable:
    """Tabulate ``N_t`` at lattice points. ``tail_mass`` is the Gaussian-integral tail bound."""
    if t <= 0:
        raise ValueError(f"normal kernel needs t > 0, got {t}")
    s = math.sqrt(2 * t)
    if radius is None:
        r = 0
        while d * erfc(r / s) >= threshold:
            r += 1
    else:
        r = int(radius)
    n = np.arange(-r, r + 1, dtype=np.float64)
    row = np.exp(-n * n / (2 * t)) / math.sqrt(2 * math.pi * t)
    tail1 = float(erfc(r / s))
    tail = float(-np.expm1(d * np.log1p(-min(tail1, 1.0)))) if tail1 < 1 else 1.0
    return KernelTable("normal", float(t), (r,) * d, _outer_power(row, d), tail)


@dataclass
class RealField:
    """Real values on every site of a torus, stored in grid shape."""

    lattice: Lattice
    values: np.ndarray

    def block_sum(self, rect) -> float:
        from .lattice import _wrapped_index

        return float(self.values[_wrapped_index(self.lattice, rect)].sum())

    def positive_part(self) -> "RealField":
        return RealField(self.lattice, np.maximum(self.values, 0.0))

    def negative_part(self) -> "RealField":
        return RealField(self.lattice, np.maximum(-self.values, 0.0))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*[f"x{j}" for j in range(self.lattice.d)], "value"])
        for idx in np.ndindex(*self.values.shape):
            w.writerow([*idx, repr(float(self.values[idx]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def convolve_field(field, kernel: KernelTable, lattice: Lattice | None = None) -> RealField:
    """Periodic lattice sum ``(f * k)(x) = sum_y f(x - y) k(y)`` over the tabulated stencil.

    ``field`` is an :class:`OccupancyField` (its signed view is used) or an array of
    site values together with ``lattice``.
    """
    if isinstance(field, OccupancyField):
        lattice = field.lattice
        values = field.signed_grid()
    else:
        if lattice is None:
            raise ValueError("lattice required when convolving a raw array")
        values = np.asarray(field).reshape(lattice.shape)
    if kernel.d != lattice.d:
        raise ValueError("kernel and lattice dimensions differ")
    for r, side in zip(kernel.radius, lattice.sides):
        if 2 * r + 1 > side:
            raise ValueError(
                f"kernel radius {r} exceeds half the torus side {side}; wrapping would alias"
            )
    out = ndimage.convolve(values.astype(np.float64), kernel.values, mode="wrap")
    return RealField(lattice, out)


@dataclass(frozen=True)
class GapRow:
    t: float
    sup: float
    l1: float
    l2: float


def kernel_gap_scan(t_list: Sequence[float], d: int = 1,
                    walk=None) -> list[GapRow]:
    """Sup, L1 and squared-L2 distance between ``N_t`` and ``K_t`` over the lattice window.

    ``walk`` may replace :func:`walk_table` (used for fault injection in tests).
    """
    make_walk = walk or walk_table
    rows = []
    for t in t_list:
        if t < 4:
            raise ValueError(f"gap scan needs t >= 4, got {t}")
        k = make_walk(t, d)
        r = max(k.radius[0], normal_table(t, d).radius[0])
        k = make_walk(t, d, radius=r)
        n = normal_table(t, d, radius=r)
        diff = n.values - k.values
        rows.append(
            GapRow(float(t), float(np.abs(diff).max()), float(np.abs(diff).sum()),
                   float((diff * diff).sum()))
        )
    return rows
