"""Estimators and goodness-of-fit tools that turn snapshots into limit-law quantities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.stats import halfnorm, kstwobign, norm

from .gaussian import sample_smoothed_field
from .kernels import RealField, convolve_field, normal_table, walk_table
from .lattice import OccupancyField, Rectangle, block_counts

__all__ = [
    "MetricSeries",
    "mean_ci",
    "ks_test",
    "ks_2samp",
    "dispersion_index",
    "density",
    "amplitude_target",
    "amplitude_series",
    "loglog_slope",
    "box_sums",
    "minority_ratios",
    "minority_fraction",
    "conditional_mean_field",
    "PairStats",
    "pair_stats",
    "Theorem3Report",
    "theorem3_diagnostic",
    "block_variance_target",
    "block_variance_gridsum",
    "MacroReport",
    "macro_gaussian_test",
    "MicroReport",
    "microscale_poisson_test",
    "StepFunction",
    "laplace_functional",
    "poisson_laplace_reference",
]


# --- statistics suite -----------------------------------------------------------


def mean_ci(values) -> tuple[float, float]:
    """Sample mean and its standard error ``std(ddof=1) / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError(f"need at least 2 values, got {v.size}")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def ks_test(sample, cdf: Callable) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic with the asymptotic Kolmogorov p-value."""
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    n = x.size
    if n < 20:
        raise ValueError(f"KS asymptotics need at least 20 points, got {n}")
    f = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    stat = float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
    return stat, float(kstwobign.sf(math.sqrt(n) * stat))


def ks_2samp(x, y) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value (effective size ``nm/(n+m)``)."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    n, m = x.size, y.size
    if min(n, m) < 20:
        raise ValueError("KS asymptotics need at least 20 points per sample")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / n
    fy = np.searchsorted(y, grid, side="right") / m
    stat = float(np.max(np.abs(fx - fy)))
    ne = n * m / (n + m)
    return stat, float(kstwobign.sf(math.sqrt(ne) * stat))


def dispersion_index(counts) -> float:
    """Variance-to-mean ratio (sample variance, ddof=1); 0 for constant counts."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size < 2:
        raise ValueError("need at least 2 counts")
    mu = c.mean()
    var = c.var(ddof=1)
    if var == 0:
        return 0.0
    if mu == 0:
        raise ValueError("dispersion undefined for zero mean")
    return float(var / mu)


# --- metric series ----------------------------------------------------------------


@dataclass
class MetricSeries:
    """Per-replica values of one estimator on a time grid (rows: replicas)."""

    name: str
    times: np.ndarray
    values: np.ndarray
    reference: float | None = None
    anchor: str = ""
    se_override: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != self.times.size:
            raise ValueError("values must have one column per time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be increasing")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        if self.se_override is not None:
            return self.se_override
        if self.n < 2:
            return np.full(self.times.size, np.nan)
        return self.values.std(axis=0, ddof=1) / math.sqrt(self.n)

    def at(self, t: float) -> tuple[float, float]:
        k = int(np.flatnonzero(np.isclose(self.times, t))[0])
        return float(self.mean[k]), float(self.se[k])

    def rows(self) -> list[dict]:
        return [
            {"time": float(t), "mean": float(m), "se": float(s), "n": self.n}
            for t, m, s in zip(self.times, self.mean, self.se)
        ]

    def to_csv(self, full: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if full:
            w.writerow(["replica", *[repr(float(t)) for t in self.times]])
            for r, row in enumerate(self.values):
                w.writerow([r, *[repr(float(v)) for v in row]])
        else:
            w.writerow(["time", "mean", "se", "n"])
            for row in self.rows():
                w.writerow([repr(row["time"]), repr(row["mean"]), repr(row["se"]), row["n"]])
        return buf.getvalue()


# --- densities ------------------------------------------------------------------


def density(field: OccupancyField) -> tuple[float, float]:
    """Spatial averages of A and B counts per site."""
    m = field.lattice.n_sites
    na, nb = field.totals
    return na / m, nb / m


def amplitude_target(lam: float, d: int) -> float:
    """``(lam / pi)^{1/2} (4 pi)^{-d/4}``, the limit of ``t^{d/4} rho(t)``."""
    return math.sqrt(lam / math.pi) * (4 * math.pi) ** (-d / 4)


def amplitude_series(series: MetricSeries, d: int, lam: float | None = None) -> MetricSeries:
    """Rescale a density series by ``t^{d/4}``; standard errors scale identically."""
    if np.any(series.times <= 0):
        raise ValueError("amplitude needs positive times")
    scale = series.times ** (d / 4)
    ref = amplitude_target(lam, d) if lam is not None else None
    return MetricSeries(f"amplitude({series.name})", series.times, series.values * scale,
                        reference=ref, anchor="t^{d/4} rho(t) limit")


def loglog_slope(times, values) -> float:
    """Least-squares slope of ``log values`` against ``log times``."""
    return float(np.polyfit(np.log(np.asarray(times, float)), np.log(np.asarray(values, float)), 1)[0])


# --- segregation --------------------------------------------------------------------


def box_sums(counts: np.ndarray, shape: tuple[int, ...], side: int) -> np.ndarray:
    """Sums over the disjoint cubes of ``side`` tiling the grid (remainders dropped)."""
    grid = np.asarray(counts).reshape(shape)
    nb = [s // side for s in shape]
    if any(k == 0 for k in nb):
        raise ValueError(f"box side {side} exceeds the torus {shape}")
    grid = grid[tuple(slice(0, k * side) for k in nb)]
    split = []
    for k in nb:
        split += [k, side]
    return grid.reshape(split).sum(axis=tuple(range(1, 2 * len(nb), 2)))


def minority_ratios(field: OccupancyField, box_side: int) -> np.ndarray:
    """``xi^m(D) / max(1, xi^#(D))`` for every tiling box D."""
    side = max(1, int(round(box_side)))
    shape = field.lattice.shape
    a = box_sums(field.a, shape, side)
    b = box_sums(field.b, shape, side)
    return (np.minimum(a, b) / np.maximum(1, a + b)).ravel()


def minority_fraction(field: OccupancyField, box_side: float) -> float:
    """Box-averaged share of minority-type particles; empty boxes count as 0."""
    return float(minority_ratios(field, box_side).mean())


# --- conditional expectations and sample-path comparison ---------------------------


def conditional_mean_field(snapshot: OccupancyField, horizon: float) -> RealField:
    """``xi_s * K_{t-s}``: the conditional mean of the signed field ``horizon`` later."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    return convolve_field(snapshot, walk_table(horizon, snapshot.lattice.d))


@dataclass(frozen=True)
class PairStats:
    pearson_r: float
    rmse: float
    scale: float
    degenerate: bool = False


def pair_stats(observed, predicted, scale: float = 1.0) -> PairStats:
    """Pearson correlation and RMSE of ``observed - predicted`` divided by ``scale``."""
    x = np.asarray(observed, dtype=np.float64)
    y = np.asarray(predicted, dtype=np.float64)
    rmse = float(np.sqrt(np.mean((x - y) ** 2)) / scale)
    if x.std() == 0 or y.std() == 0:
        return PairStats(float("nan"), rmse, scale, degenerate=True)
    return PairStats(float(np.corrcoef(x, y)[0, 1]), rmse, scale)


@dataclass
class Theorem3Report:
    signed: PairStats
    a: PairStats
    b: PairStats
    n_replicas: int
    observed: np.ndarray = field(repr=False)
    predicted: np.ndarray = field(repr=False)

    @property
    def degenerate(self) -> bool:
        return self.signed.degenerate or self.a.degenerate or self.b.degenerate


def theorem3_diagnostic(pairs: Sequence[tuple[OccupancyField, OccupancyField]],
                        rect: Rectangle, t: float) -> Theorem3Report:
    """Compare block counts at time ``t`` with the smoothed initial field over ``rect``.

    Columns of ``observed``/``predicted``: signed, A, B. The predictions are
    ``(xi_0 * N_t)(D)``, ``sum_D (xi_0 * N_t)^-`` and ``sum_D (xi_0 * N_t)^+``.
    """
    if len(pairs) < 30:
        raise ValueError(f"need at least 30 replicas, got {len(pairs)}")
    d = pairs[0][0].lattice.d
    kern = normal_table(t, d)
    obs = np.empty((len(pairs), 3))
    pred = np.empty((len(pairs), 3))
    for i, (f0, ft) in enumerate(pairs):
        conv = convolve_field(f0, kern)
        bc = block_counts(ft, rect)
        obs[i] = (bc.signed, bc.a, bc.b)
        pred[i] = (conv.block_sum(rect), conv.negative_part().block_sum(rect),
                   conv.positive_part().block_sum(rect))
    scale = t ** (d / 4)
    return Theorem3Report(
        pair_stats(obs[:, 0], pred[:, 0], scale),
        pair_stats(obs[:, 1], pred[:, 1], scale),
        pair_stats(obs[:, 2], pred[:, 2], scale),
        len(pairs), obs, pred,
    )


# --- macroscopic Gaussian limit ----------------------------------------------------


def _pair_integral_1d(width: float, t: float) -> float:
    # int_0^w int_0^w n_{2t}(x - y) dx dy = int_{-w}^{w} (w - |u|) n_{2t}(u) du
    s2 = 2 * t

    def f(u):
        return (width - abs(u)) * math.exp(-u * u / (2 * s2)) / math.sqrt(2 * math.pi * s2)

    val, _ = integrate.quad(f, 0.0, width, epsabs=1e-14, epsrel=1e-13)
    return 2 * val


def block_variance_target(rect: Rectangle, lam: float, t: float = 1.0) -> float:
    """``2 lam int_D int_D N_{2t}(x - y) dx dy`` (the kernel factorises over coordinates)."""
    out = 2 * lam
    for y, x in zip(rect.lower, rect.upper):
        out *= _pair_integral_1d(x - y, t)
    return out


def block_variance_gridsum(rect: Rectangle, lam: float, t: float = 1.0, n: int = 2000) -> float:
    """Same target by a midpoint double sum with Richardson extrapolation."""

    def once(k):
        out = 2 * lam
        for y, x in zip(rect.lower, rect.upper):
            h = (x - y) / k
            pts = y + h * (np.arange(k) + 0.5)
            diff = pts[:, None] - pts[None, :]
            kern = np.exp(-diff ** 2 / (4 * t)) / math.sqrt(4 * math.pi * t)
            out *= float(kern.sum()) * h * h
        return out

    coarse, fine = once(n // 2), once(n)
    return (4 * fine - coarse) / 3


@dataclass
class MacroReport:
    n_replicas: int
    sigma2: float
    signed_stat: float
    signed_p: float
    raw_signed_stat: float
    raw_signed_p: float
    a_stat: float
    a_p: float
    b_stat: float
    b_p: float
    scaled_signed: np.ndarray = field(repr=False)
    scaled_a: np.ndarray = field(repr=False)
    scaled_b: np.ndarray = field(repr=False)


def macro_gaussian_test(finals: Sequence[OccupancyField], rect: Rectangle, lam: float, T: float,
                        t: float = 1.0, rng_seed=0, n_reference: int = 20000,
                        points_per_side: int | None = None) -> MacroReport:
    """KS tests of rescaled block counts against the smoothed white-noise limit.

    ``finals`` are fields at time ``T t``; ``rect`` is in macroscopic units.
    The signed block is tested against Normal(0, sigma2) both as is and with a
    uniform jitter of one lattice unit before rescaling, which removes the
    lattice atoms that a continuous-law KS test cannot absorb. Per-type blocks
    are compared with sampled ``(2 lam)^{1/2} (Phi * N_t)^{-/+}(D)``.
    """
    if len(finals) < 300:
        raise ValueError(f"need at least 300 replicas, got {len(finals)}")
    d = rect.d
    big = rect.scaled(math.sqrt(T))
    counts = np.array([tuple(block_counts(f, big))[:3] for f in finals], dtype=np.float64)
    scale = T ** (d / 4)
    a, b, s = counts[:, 0] / scale, counts[:, 1] / scale, counts[:, 2] / scale
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(rng_seed), 1])))
    jittered = (counts[:, 2] + rng.uniform(-0.5, 0.5, counts.shape[0])) / scale
    sigma2 = block_variance_target(rect, lam, t)
    sd = math.sqrt(sigma2)
    raw_stat, raw_p = ks_test(s, lambda x: norm.cdf(x, scale=sd))
    j_stat, j_p = ks_test(jittered, lambda x: norm.cdf(x, scale=sd))

    k = points_per_side or (64 if d == 1 else 16 if d == 2 else 8)
    axes = [y + (x - y) * (np.arange(k) + 0.5) / k for y, x in zip(rect.lower, rect.upper)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    ref = sample_smoothed_field(pts, t, [int(rng_seed), 2], size=n_reference, lam=lam).values
    cell = rect.volume / pts.shape[0]
    ref_neg = np.maximum(-ref, 0).sum(axis=1) * cell
    ref_pos = np.maximum(ref, 0).sum(axis=1) * cell
    a_stat, a_p = ks_2samp(a, ref_neg)
    b_stat, b_p = ks_2samp(b, ref_pos)
    return MacroReport(len(finals), sigma2, j_stat, j_p, raw_stat, raw_p, a_stat, a_p,
                       b_stat, b_p, s, a, b)


# --- microscopic Poisson mixture ------------------------------------------------------


@dataclass
class MicroReport:
    n_replicas: int
    n_windows: int
    dispersion: float
    dispersion_se: float
    contamination: float
    intensity_stat: float
    intensity_p: float
    intensity_scale: float
    intensities: np.ndarray = field(repr=False)


def _window_cells(t: float, cell_side: int, d: int) -> tuple[int, int]:
    half = t ** 0.25
    per_dim = int(math.floor(2 * half / cell_side))
    if per_dim < 4:
        raise ValueError(
            f"window 2 t^(1/4) = {2 * half:g} holds fewer than 4 cells of side {cell_side}"
        )
    return per_dim, int(math.floor(half))


def microscale_poisson_test(pairs: Sequence[tuple[OccupancyField, OccupancyField]], t: float,
                            cell_side: int, lam: float, tile: bool = True) -> MicroReport:
    """Conditional Poisson structure inside windows of half-width ``t^{1/4}``.

    Each window is centred on a site x; its conditioning intensity is
    ``t^{d/4} |(xi_0 * N_t)(x)|`` and its sign picks the dominant type. With
    ``tile`` the windows tile the torus, otherwise only the origin window is used.
    Dispersion is the pooled ratio of within-window count variance to mean of the
    dominant type over cells; contamination is the share of cells holding any
    minority-type particle. The origin-window intensities (one per replica) are
    KS-tested against the half-normal with variance ``2 lam (4 pi)^{-d/2}``.
    """
    if not pairs:
        raise ValueError("no replicas")
    lat = pairs[0][0].lattice
    d = lat.d
    per_dim, half = _window_cells(t, cell_side, d)
    width = per_dim * cell_side
    if tile:
        if any(s % width for s in lat.sides):
            raise ValueError(f"torus sides {lat.sides} are not multiples of window width {width}")
        centres = [np.arange(0, s, width) for s in lat.sides]
    else:
        centres = [np.array([0]) for _ in lat.sides]
    kern = normal_table(t, d)
    scale = t ** (d / 4)
    shape = lat.shape
    offs = np.arange(-half + 1, -half + 1 + width)

    ss = 0.0
    mm = 0.0
    window_terms = []
    minority_cells = 0
    n_cells = 0
    intensities = []
    for f0, ft in pairs:
        conv = convolve_field(f0, kern).values
        a = ft.a.reshape(shape)
        b = ft.b.reshape(shape)
        for centre in np.stack(np.meshgrid(*centres, indexing="ij"), -1).reshape(-1, d):
            ix = np.ix_(*[np.mod(c + offs, s) for c, s in zip(centre, shape)])
            c_val = float(conv[tuple(centre)])
            dom, mino = (b, a) if c_val > 0 else (a, b)
            nd = box_sums(dom[ix], (width,) * d, cell_side).ravel()
            nm = box_sums(mino[ix], (width,) * d, cell_side).ravel()
            k = nd.size
            dev = float(((nd - nd.mean()) ** 2).sum())
            ss += dev
            mm += (k - 1) * nd.mean()
            window_terms.append((dev, (k - 1) * nd.mean()))
            minority_cells += int((nm > 0).sum())
            n_cells += k
            if not np.any(centre):
                intensities.append(scale * abs(c_val))
    wt = np.array(window_terms)
    disp = ss / mm if mm > 0 else float("nan")
    # delta-method standard error of a ratio of sums over windows
    nwin = wt.shape[0]
    if nwin > 1 and mm > 0:
        resid = wt[:, 0] - disp * wt[:, 1]
        disp_se = float(math.sqrt(nwin / (nwin - 1) * np.sum(resid ** 2)) / mm)
    else:
        disp_se = float("nan")
    inten = np.array(intensities)
    sigma = math.sqrt(2 * lam * (4 * math.pi) ** (-d / 2))
    if inten.size >= 20:
        stat, p = ks_test(inten, lambda x: halfnorm.cdf(x, scale=sigma))
    else:
        stat, p = float("nan"), float("nan")
    return MicroReport(len(pairs), nwin, float(disp), disp_se, minority_cells / n_cells,
                       stat, p, sigma, inten)


# --- Laplace functionals ----------------------------------------------------------------


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant non-negative function on a grid of cubes in rescaled space.

    Cell ``k`` (multi-index) is ``lower + cell * (k, k + 1]``; outside the grid it is 0.
    """

    lower: tuple[float, ...]
    cell: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != len(self.lower):
            raise ValueError("values must have one axis per dimension")
        if np.any(vals < 0):
            raise ValueError("Laplace functionals need f >= 0")
        object.__setattr__(self, "values", vals)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = np.ceil((x - np.asarray(self.lower)) / self.cell).astype(np.int64) - 1
        inside = np.all((k >= 0) & (k < np.asarray(self.values.shape)), axis=1)
        out = np.zeros(x.shape[0])
        kk = k[inside]
        out[inside] = self.values[tuple(kk.T)]
        return out

    def integral(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        """``sum_cells cell^d g(f)``, counting only cells of the grid."""
        return float(np.sum(g(self.values)) * self.cell ** self.values.ndim)


def _site_offsets(lattice) -> np.ndarray:
    coords = lattice.decode(np.arange(lattice.n_sites)).astype(np.float64)
    sides = np.asarray(lattice.sides, dtype=np.float64)
    # wrap into (-L/2, L/2]
    return coords - sides * (coords > sides / 2)


def laplace_functional(fields: Sequence[OccupancyField], f_a: StepFunction | None,
                       f_b: StepFunction | None, t: float) -> tuple[float, float]:
    """Monte Carlo ``E exp{-sum_x f_a(x/t^{1/4}) a(x) - f_b(x/t^{1/4}) b(x)}`` with its standard error.

    Positions are taken relative to site 0 on the torus.
    """
    if not fields:
        raise ValueError("no fields")
    pos = _site_offsets(fields[0].lattice) / t ** 0.25
    wa = f_a(pos) if f_a is not None else np.zeros(pos.shape[0])
    wb = f_b(pos) if f_b is not None else np.zeros(pos.shape[0])
    vals = np.array([math.exp(-(np.dot(wa, fl.a) + np.dot(wb, fl.b))) for fl in fields])
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return float(vals.mean()), se


def poisson_laplace_reference(c: float, f: StepFunction) -> float:
    """Laplace functional of a homogeneous Poisson field of intensity ``c``."""
    return math.exp(c * f.integral(lambda v: np.exp(-v) - 1.0))
