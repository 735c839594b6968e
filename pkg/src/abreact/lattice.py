"""Periodic lattice geometry, half-open rectangles and the two-type occupancy field."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Lattice",
    "Rectangle",
    "OccupancyField",
    "BlockCounts",
    "block_counts",
    "scaled_block",
]


@dataclass(frozen=True)
class Lattice:
    """Periodic box ``Z^d / (L_0 x ... x L_{d-1})`` with row-major site indices."""

    sides: tuple[int, ...]

    def __post_init__(self):
        sides = tuple(int(s) for s in self.sides)
        object.__setattr__(self, "sides", sides)
        if not 1 <= len(sides) <= 3:
            raise ValueError(f"dimension must be 1, 2 or 3, got {len(sides)}")
        if any(s < 2 for s in sides):
            raise ValueError(f"all sides must be >= 2, got {sides}")

    @classmethod
    def cube(cls, side: int, d: int) -> "Lattice":
        return cls((side,) * d)

    @property
    def d(self) -> int:
        return len(self.sides)

    @property
    def n_sites(self) -> int:
        return math.prod(self.sides)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.sides

    @property
    def strides(self) -> tuple[int, ...]:
        out = []
        acc = 1
        for s in reversed(self.sides):
            out.append(acc)
            acc *= s
        return tuple(reversed(out))

    def encode(self, coords) -> np.ndarray | int:
        """Site index of ``coords`` (wrapped into the torus). Accepts ``(..., d)`` arrays."""
        c = np.asarray(coords, dtype=np.int64)
        if c.shape[-1] != self.d:
            raise ValueError(f"expected trailing dimension {self.d}, got shape {c.shape}")
        c = np.mod(c, self.sides)
        idx = (c * np.asarray(self.strides, dtype=np.int64)).sum(axis=-1)
        return int(idx) if idx.ndim == 0 else idx

    def decode(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.int64)
        if np.any((idx < 0) | (idx >= self.n_sites)):
            raise ValueError("site index out of range")
        return np.stack(np.unravel_index(idx, self.sides), axis=-1)

    def neighbors(self, index: int) -> list[int]:
        """The 2d nearest neighbours of a site, ordered (-e_0, +e_0, -e_1, ...)."""
        c = self.decode(index)
        out = []
        for j in range(self.d):
            for step in (-1, 1):
                n = c.copy()
                n[j] += step
                out.append(self.encode(n))
        return out


@dataclass(frozen=True)
class Rectangle:
    """Half-open box ``prod_j (lower_j, upper_j]`` in R^d."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must have the same positive length")
        if any(y >= x for y, x in zip(lo, hi)):
            raise ValueError(f"need lower < upper in every dimension, got {lo}, {hi}")

    @classmethod
    def cube(cls, corner: Sequence[float], side: float) -> "Rectangle":
        return cls(tuple(corner), tuple(c + side for c in corner))

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return math.prod(x - y for y, x in zip(self.lower, self.upper))

    def scaled(self, factor: float) -> "Rectangle":
        return Rectangle(
            tuple(factor * y for y in self.lower), tuple(factor * x for x in self.upper)
        )

    def translated(self, offset: Sequence[float]) -> "Rectangle":
        return Rectangle(
            tuple(y + o for y, o in zip(self.lower, offset)),
            tuple(x + o for x, o in zip(self.upper, offset)),
        )

    def intersection_volume(self, other: "Rectangle") -> float:
        vol = 1.0
        for y1, x1, y2, x2 in zip(self.lower, self.upper, other.lower, other.upper):
            vol *= max(0.0, min(x1, x2) - max(y1, y2))
        return vol

    def lattice_ranges(self) -> list[range]:
        """Integer points per dimension: ``n`` with ``lower < n <= upper``."""
        return [
            range(math.floor(y) + 1, math.floor(x) + 1)
            for y, x in zip(self.lower, self.upper)
        ]

    def site_count(self) -> int:
        """``|D|``, the number of lattice sites in D."""
        return math.prod(len(r) for r in self.lattice_ranges())

    def vertices(self) -> list[tuple[tuple[float, ...], int]]:
        """All 2^d vertices with ``nu``, the number of coordinates shared with ``lower``."""
        out = []
        for mask in range(2 ** self.d):
            z = []
            nu = 0
            for j in range(self.d):
                if mask >> j & 1:
                    z.append(self.upper[j])
                else:
                    z.append(self.lower[j])
                    nu += 1
            out.append((tuple(z), nu))
        return out


def _wrapped_index(lattice: Lattice, rect: Rectangle) -> tuple[np.ndarray, ...]:
    if rect.d != lattice.d:
        raise ValueError(f"rectangle dimension {rect.d} != lattice dimension {lattice.d}")
    idx = []
    for r, side in zip(rect.lattice_ranges(), lattice.sides):
        if len(r) == 0:
            raise ValueError("rectangle contains no lattice sites")
        if len(r) > side:
            raise ValueError(
                f"rectangle spans {len(r)} sites but the torus side is {side}; "
                "wrapping would double count"
            )
        idx.append(np.mod(np.arange(r.start, r.stop, dtype=np.int64), side))
    return np.ix_(*idx)


@dataclass(frozen=True)
class BlockCounts:
    a: int
    b: int
    signed: int
    minority: int

    @property
    def total(self) -> int:
        return self.a + self.b

    def __iter__(self):
        return iter((self.a, self.b, self.signed, self.minority))


@dataclass
class OccupancyField:
    """Per-site A and B counts on a torus.

    Counts are held densely (one entry per site) because the engine's Fenwick
    sampler already spans every site; :attr:`counts` gives the sparse view.
    """

    lattice: Lattice
    a: np.ndarray
    b: np.ndarray
    _totals: tuple[int, int] = field(default=(0, 0), repr=False)

    def __post_init__(self):
        m = self.lattice.n_sites
        self.a = np.ascontiguousarray(self.a, dtype=np.int64).reshape(m)
        self.b = np.ascontiguousarray(self.b, dtype=np.int64).reshape(m)
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise ValueError("occupancy counts must be non-negative")
        self._totals = (int(self.a.sum()), int(self.b.sum()))

    @classmethod
    def empty(cls, lattice: Lattice) -> "OccupancyField":
        m = lattice.n_sites
        return cls(lattice, np.zeros(m, np.int64), np.zeros(m, np.int64))

    @classmethod
    def from_counts(
        cls, lattice: Lattice, counts: Mapping[int, tuple[int, int]]
    ) -> "OccupancyField":
        f = cls.empty(lattice)
        for site, (na, nb) in counts.items():
            f.a[site] = na
            f.b[site] = nb
        f.refresh_totals()
        return f

    @classmethod
    def from_signed(cls, lattice: Lattice, signed) -> "OccupancyField":
        """Exclusive field with ``b - a`` equal to ``signed`` at every site."""
        s = np.asarray(signed, dtype=np.int64).reshape(lattice.n_sites)
        return cls(lattice, np.maximum(-s, 0), np.maximum(s, 0))

    def refresh_totals(self) -> None:
        self._totals = (int(self.a.sum()), int(self.b.sum()))

    @property
    def totals(self) -> tuple[int, int]:
        return self._totals

    @property
    def total(self) -> int:
        return self._totals[0] + self._totals[1]

    @property
    def counts(self) -> dict[int, tuple[int, int]]:
        nz = np.flatnonzero(self.a + self.b)
        return {int(i): (int(self.a[i]), int(self.b[i])) for i in nz}

    def signed(self) -> np.ndarray:
        """``xi(x) = b(x) - a(x)`` as a flat array."""
        return self.b - self.a

    def signed_grid(self) -> np.ndarray:
        return self.signed().reshape(self.lattice.shape)

    def is_exclusive(self) -> bool:
        return not np.any(np.minimum(self.a, self.b))

    def check_invariants(self, exclusive: bool = False) -> None:
        if self._totals != (int(self.a.sum()), int(self.b.sum())):
            raise AssertionError(f"cached totals {self._totals} are stale")
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise AssertionError("negative occupancy")
        if exclusive and not self.is_exclusive():
            raise AssertionError("per-site exclusivity violated")

    def copy(self) -> "OccupancyField":
        return OccupancyField(self.lattice, self.a.copy(), self.b.copy())

    def __eq__(self, other):
        if not isinstance(other, OccupancyField):
            return NotImplemented
        return (
            self.lattice == other.lattice
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )

    def to_csv(self, path=None) -> str:
        """Dense snapshot: header ``site,x0,..,a,b``, one row per site in index order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", *[f"x{j}" for j in range(self.lattice.d)], "a", "b"])
        coords = self.lattice.decode(np.arange(self.lattice.n_sites))
        for i in range(self.lattice.n_sites):
            w.writerow([i, *coords[i].tolist(), int(self.a[i]), int(self.b[i])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, lattice: Lattice, text: str) -> "OccupancyField":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        expected = ["site", *[f"x{j}" for j in range(lattice.d)], "a", "b"]
        if header != expected:
            raise ValueError(f"unexpected header {header}")
        f = cls.empty(lattice)
        for row in body:
            site = int(row[0])
            f.a[site] = int(row[-2])
            f.b[site] = int(row[-1])
        f.refresh_totals()
        return f


def block_counts(field: OccupancyField, rect: Rectangle) -> BlockCounts:
    """``(xi^A(D), xi^B(D), xi(D), xi^m(D))`` over the lattice points of D, wrapped."""
    ix = _wrapped_index(field.lattice, rect)
    shape = field.lattice.shape
    a = int(field.a.reshape(shape)[ix].sum())
    b = int(field.b.reshape(shape)[ix].sum())
    return BlockCounts(a, b, b - a, min(a, b))


def scaled_block(field: OccupancyField, rect: Rectangle, T: float) -> float:
    """Macroscopically rescaled signed count ``xi(T^{1/2} D) / T^{d/4}``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    d = field.lattice.d
    return block_counts(field, rect.scaled(math.sqrt(T))).signed / T ** (d / 4)


def tile_boxes(lattice: Lattice, side: int) -> Iterable[Rectangle]:
    """Disjoint cubes of the given side tiling the torus (partial boxes dropped)."""
    per_dim = [s // side for s in lattice.sides]
    for k in np.ndindex(*per_dim):
        corner = tuple(float(kj * side) for kj in k)
        yield Rectangle(tuple(c - 0.5 for c in corner), tuple(c + side - 0.5 for c in corner))
