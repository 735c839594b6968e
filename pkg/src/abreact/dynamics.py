"""Exact Gillespie engine for annihilating, coalescing and free random walks on a torus.

Only per-site counts are tracked. Sites are drawn with probability proportional to
their occupancy through a Fenwick tree, so one event costs O(log M) for M sites.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .lattice import Lattice, OccupancyField

__all__ = [
    "InteractionMode",
    "SimulationState",
    "make_rng",
    "init_poisson_two_type",
    "init_full_single_type",
    "init_from_field",
    "advance",
    "run_with_snapshots",
    "simulate_marginals",
    "AuditError",
]

AUDIT_INTERVAL = 1 << 20

_REACHED = 0
_NEED_RNG = 1
_AUDIT_FAILED = 2


class AuditError(RuntimeError):
    """The sampler's cumulative weights disagree with the occupancy field."""


class InteractionMode(enum.Enum):
    TWO_TYPE_ANNIHILATE = "two-type-annihilate"
    SINGLE_TYPE_ANNIHILATE = "single-type-annihilate"
    SINGLE_TYPE_COALESCE = "single-type-coalesce"
    FREE = "free"

    @property
    def code(self) -> int:
        return _MODE_CODES[self]

    @property
    def annihilating(self) -> bool:
        return self in (InteractionMode.TWO_TYPE_ANNIHILATE, InteractionMode.SINGLE_TYPE_ANNIHILATE)


_MODE_CODES = {
    InteractionMode.TWO_TYPE_ANNIHILATE: 0,
    InteractionMode.SINGLE_TYPE_ANNIHILATE: 1,
    InteractionMode.SINGLE_TYPE_COALESCE: 2,
    InteractionMode.FREE: 3,
}


# --- Fenwick tree over site weights (1-based internal layout) -----------------


@numba.njit(cache=True)
def _fen_build(w):
    m = w.shape[0]
    tree = np.zeros(m + 1, np.int64)
    for i in range(1, m + 1):
        tree[i] += w[i - 1]
        j = i + (i & -i)
        if j <= m:
            tree[j] += tree[i]
    return tree


@numba.njit(cache=True)
def _fen_add(tree, site, delta):
    m = tree.shape[0] - 1
    i = site + 1
    while i <= m:
        tree[i] += delta
        i += i & -i


@numba.njit(cache=True)
def _fen_prefix(tree, n):
    s = 0
    i = n
    while i > 0:
        s += tree[i]
        i -= i & -i
    return s


@numba.njit(cache=True)
def _fen_find(tree, r, top_bit):
    # site s with prefix(s) <= r < prefix(s + 1), and r - prefix(s)
    m = tree.shape[0] - 1
    pos = 0
    bit = top_bit
    while bit > 0:
        nxt = pos + bit
        if nxt <= m and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        bit >>= 1
    return pos, r


def _top_bit(m: int) -> int:
    return 1 << (m.bit_length() - 1)


# --- event loop ---------------------------------------------------------------


@numba.njit(cache=True)
def _advance(a, b, tree, sides, strides, mode, scal, cnt, t_target, buf, pos, top_bit):
    """Run events until ``t_target``.

    scal[0] is the clock; cnt = [total particles W, events, A total, B total].
    Returns (status, buffer position).
    """
    d = sides.shape[0]
    nbuf = buf.shape[0]
    clock = scal[0]
    w = cnt[0]
    events = cnt[1]
    status = _REACHED
    while True:
        if w == 0:
            clock = t_target
            break
        if pos + 3 > nbuf:
            status = _NEED_RNG
            break
        rate = d * w
        dt = -np.log1p(-buf[pos]) / rate
        if clock + dt > t_target:
            pos += 1
            clock = t_target
            break
        clock += dt
        r = np.int64(buf[pos + 1] * w)
        if r >= w:
            r = w - 1
        direction = np.int64(buf[pos + 2] * 2 * d)
        if direction >= 2 * d:
            direction = 2 * d - 1
        pos += 3
        src, rem = _fen_find(tree, r, top_bit)

        j = direction // 2
        cj = (src // strides[j]) % sides[j]
        if direction % 2 == 1:
            if cj == sides[j] - 1:
                dst = src - (sides[j] - 1) * strides[j]
            else:
                dst = src + strides[j]
        else:
            if cj == 0:
                dst = src + (sides[j] - 1) * strides[j]
            else:
                dst = src - strides[j]

        mover_is_a = rem < a[src]
        if mover_is_a:
            a[src] -= 1
        else:
            b[src] -= 1
        _fen_add(tree, src, -1)

        if mode == 0:
            if mover_is_a:
                if b[dst] > 0:
                    b[dst] -= 1
                    _fen_add(tree, dst, -1)
                    w -= 2
                    cnt[2] -= 1
                    cnt[3] -= 1
                else:
                    a[dst] += 1
                    _fen_add(tree, dst, 1)
            else:
                if a[dst] > 0:
                    a[dst] -= 1
                    _fen_add(tree, dst, -1)
                    w -= 2
                    cnt[2] -= 1
                    cnt[3] -= 1
                else:
                    b[dst] += 1
                    _fen_add(tree, dst, 1)
        elif mode == 1:
            if b[dst] > 0:
                b[dst] -= 1
                _fen_add(tree, dst, -1)
                w -= 2
                cnt[3] -= 2
            else:
                b[dst] += 1
                _fen_add(tree, dst, 1)
        elif mode == 2:
            if b[dst] > 0:
                w -= 1
                cnt[3] -= 1
            else:
                b[dst] += 1
                _fen_add(tree, dst, 1)
        else:
            if mover_is_a:
                a[dst] += 1
            else:
                b[dst] += 1
            _fen_add(tree, dst, 1)

        events += 1
        if events % 1048576 == 0:
            m = tree.shape[0] - 1
            occ = 0
            for i in range(m):
                occ += a[i] + b[i]
            if occ != w or _fen_prefix(tree, m) != w:
                status = _AUDIT_FAILED
                break
    scal[0] = clock
    cnt[0] = w
    cnt[1] = events
    return status, pos


# --- state ---------------------------------------------------------------------


def make_rng(seed, replica: int | None = None) -> np.random.Generator:
    """PCG64 stream for ``seed``; replica ``r`` gets the substream keyed by ``(seed, r)``.

    ``seed`` may also be a sequence of integers, which is used as the entropy key.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    key = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    if replica is not None:
        key.append(int(replica))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass
class SimulationState:
    """Occupancy field, clock, interaction mode, Fenwick sampler and random stream."""

    field: OccupancyField
    mode: InteractionMode
    rng: np.random.Generator
    clock: float = 0.0
    events: int = 0
    lam: float | None = None
    seed: object = None
    tree: np.ndarray = field(init=False, repr=False)
    _buf: np.ndarray = field(init=False, repr=False)
    _pos: int = field(init=False, repr=False, default=0)
    _chunk: int = field(init=False, repr=False, default=3 * 1024)
    wall_time: float = field(init=False, default=0.0)

    def __post_init__(self):
        f = self.field
        self.tree = _fen_build(f.a + f.b)
        self._buf = np.empty(0)
        self._pos = 0
        self._sides = np.asarray(f.lattice.sides, dtype=np.int64)
        self._strides = np.asarray(f.lattice.strides, dtype=np.int64)
        self._top = _top_bit(f.lattice.n_sites)

    @property
    def lattice(self) -> Lattice:
        return self.field.lattice

    @property
    def sampler_total(self) -> int:
        return int(_fen_prefix(self.tree, self.lattice.n_sites))

    def audit(self) -> None:
        """Exact comparison of sampler weights with the occupancy field."""
        f = self.field
        occ = f.a + f.b
        if self.sampler_total != int(occ.sum()) or self.sampler_total != f.total:
            raise AuditError(
                f"sampler total {self.sampler_total} vs occupancy {int(occ.sum())} "
                f"vs cached {f.total}"
            )
        if not np.array_equal(self.tree, _fen_build(occ)):
            raise AuditError("sampler partial sums disagree with the occupancy field")
        f.check_invariants(exclusive=self.mode is InteractionMode.TWO_TYPE_ANNIHILATE)
        if self.mode in (InteractionMode.SINGLE_TYPE_ANNIHILATE, InteractionMode.SINGLE_TYPE_COALESCE):
            if f.totals[0] != 0:
                raise AuditError("single-type mode holds A particles")

    def snapshot(self) -> OccupancyField:
        return self.field.copy()

    def manifest(self) -> dict:
        return {
            "mode": self.mode.value,
            "lambda": self.lam,
            "lattice": list(self.lattice.sides),
            "seed": self.seed if not isinstance(self.seed, tuple) else list(self.seed),
            "clock": self.clock,
            "events": self.events,
            "wall_time": self.wall_time,
        }

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)


def _seed_key(seed, replica):
    return seed if replica is None else (seed, replica)


def init_poisson_two_type(lattice: Lattice, lam: float, rng_seed, replica: int | None = None,
                          mode: InteractionMode = InteractionMode.TWO_TYPE_ANNIHILATE) -> SimulationState:
    """Independent Poisson(lam) A and B counts per site, then same-site cancellation."""
    if not lam > 0:
        raise ValueError(f"intensity must be positive, got {lam}")
    rng = make_rng(rng_seed, replica)
    m = lattice.n_sites
    a = rng.poisson(lam, m).astype(np.int64)
    b = rng.poisson(lam, m).astype(np.int64)
    if mode is not InteractionMode.FREE:
        both = np.minimum(a, b)
        a -= both
        b -= both
    return SimulationState(OccupancyField(lattice, a, b), mode, rng, lam=float(lam),
                           seed=_seed_key(rng_seed, replica))


def init_full_single_type(lattice: Lattice, rng_seed, replica: int | None = None,
                          mode: InteractionMode = InteractionMode.SINGLE_TYPE_COALESCE) -> SimulationState:
    """One B particle on every site."""
    m = lattice.n_sites
    f = OccupancyField(lattice, np.zeros(m, np.int64), np.ones(m, np.int64))
    return SimulationState(f, mode, make_rng(rng_seed, replica), seed=_seed_key(rng_seed, replica))


def init_from_field(field: OccupancyField, mode: InteractionMode, rng_seed,
                    replica: int | None = None) -> SimulationState:
    if mode is InteractionMode.TWO_TYPE_ANNIHILATE and not field.is_exclusive():
        raise ValueError("two-type annihilation needs an exclusive initial field")
    if mode in (InteractionMode.SINGLE_TYPE_ANNIHILATE, InteractionMode.SINGLE_TYPE_COALESCE):
        if field.totals[0]:
            raise ValueError("single-type modes use the B channel only")
        if np.any(field.b > 1):
            raise ValueError("single-type modes need at most one particle per site")
    return SimulationState(field.copy(), mode, make_rng(rng_seed, replica),
                           seed=_seed_key(rng_seed, replica))


def advance(state: SimulationState, t_target: float) -> SimulationState:
    """Evolve ``state`` in place to ``t_target`` with the exact jump chain; returns it."""
    if t_target < state.clock:
        raise ValueError(f"cannot go back from {state.clock} to {t_target}")
    started = time.perf_counter()
    f = state.field
    scal = np.array([state.clock], dtype=np.float64)
    cnt = np.array([f.total, state.events, f.totals[0], f.totals[1]], dtype=np.int64)
    mode = state.mode.code
    while True:
        status, pos = _advance(f.a, f.b, state.tree, state._sides, state._strides, mode,
                               scal, cnt, float(t_target), state._buf, state._pos, state._top)
        state._pos = int(pos)
        if status == _NEED_RNG:
            state._buf = state.rng.random(state._chunk)
            state._pos = 0
            state._chunk = min(state._chunk * 2, 3 << 19)
            continue
        break
    state.clock = float(scal[0])
    state.events = int(cnt[1])
    f._totals = (int(cnt[2]), int(cnt[3]))
    state.wall_time += time.perf_counter() - started
    if status == _AUDIT_FAILED:
        raise AuditError(f"sampler audit failed after {state.events} events")
    return state


def run_with_snapshots(lattice: Lattice, mode: InteractionMode, snapshot_times: Sequence[float],
                       rng_seed, lam: float | None = None, replica: int | None = None,
                       initial: OccupancyField | None = None,
                       audit: bool = True) -> list[tuple[float, OccupancyField]]:
    """Deep-copied fields at each requested time.

    The initial field is Poisson(lam) for both types if ``lam`` is given, otherwise
    ``initial`` if given, otherwise one B particle per site.
    """
    times = [float(t) for t in snapshot_times]
    if any(t < 0 for t in times) or any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("snapshot times must be non-negative and strictly increasing")
    if lam is not None:
        state = init_poisson_two_type(lattice, lam, rng_seed, replica, mode=mode)
    elif initial is not None:
        state = init_from_field(initial, mode, rng_seed, replica)
    else:
        state = init_full_single_type(lattice, rng_seed, replica, mode=mode)
    out = []
    for t in times:
        advance(state, t)
        if audit:
            state.audit()
        out.append((t, state.snapshot()))
    return out


# --- many replicas of a tiny system --------------------------------------------


@numba.njit(cache=True)
def _tiny_batch(a0, b0, sides, strides, mode, times, start, stop, buf, top_bit, s1, s2):
    # sums are committed per replica, so a replica cut short by the buffer is simply redone
    m = a0.shape[0]
    nt = times.shape[0]
    pos = 0
    scal = np.zeros(1)
    cnt = np.zeros(4, np.int64)
    local = np.zeros((nt, m, 2), np.int64)
    for rep in range(start, stop):
        a = a0.copy()
        b = b0.copy()
        tree = _fen_build(a + b)
        scal[0] = 0.0
        cnt[0] = a.sum() + b.sum()
        cnt[1] = 0
        cnt[2] = a.sum()
        cnt[3] = b.sum()
        for k in range(nt):
            status, pos = _advance(a, b, tree, sides, strides, mode, scal, cnt, times[k], buf, pos, top_bit)
            if status != 0:
                return rep
            for i in range(m):
                local[k, i, 0] = a[i]
                local[k, i, 1] = b[i]
        for k in range(nt):
            for i in range(m):
                for c in range(2):
                    v = local[k, i, c]
                    s1[k, i, c] += v
                    s2[k, i, c] += v * v
    return stop


def simulate_marginals(initial: OccupancyField, mode: InteractionMode, times: Sequence[float],
                       n_replicas: int, rng_seed, chunk: int = 1 << 18):
    """Per-site means and variances of A/B counts over independent replicas.

    Returns ``(mean, var)`` arrays of shape ``(len(times), n_sites, 2)``.
    """
    times_arr = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times_arr) <= 0) or np.any(times_arr < 0):
        raise ValueError("times must be non-negative and strictly increasing")
    lat = initial.lattice
    m = lat.n_sites
    s1 = np.zeros((len(times_arr), m, 2), np.int64)
    s2 = np.zeros_like(s1)
    sides = np.asarray(lat.sides, np.int64)
    strides = np.asarray(lat.strides, np.int64)
    rng = make_rng(rng_seed)
    done = 0
    while done < n_replicas:
        buf = rng.random(chunk)
        stop = _tiny_batch(initial.a, initial.b, sides, strides, mode.code, times_arr,
                           done, n_replicas, buf, _top_bit(m), s1, s2)
        if stop == done:
            chunk *= 2
        done = stop
    mean = s1 / n_replicas
    var = s2 / n_replicas - mean ** 2
    return mean, var
