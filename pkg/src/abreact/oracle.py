"""Brute-force transient solutions of the particle chain on tiny tori.

States are occupancy tuples ``((a_0, b_0), ..., (a_{M-1}, b_{M-1}))`` reachable from a
given start, so distributions line up with the engine's count representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.stats import poisson

from .dynamics import InteractionMode
from .lattice import Lattice, OccupancyField

MAX_STATES = 200_000
TV_TOLERANCE = 1e-10

State = tuple[tuple[int, int], ...]


class StateSpaceOverflow(ValueError):
    pass


@dataclass
class GeneratorMatrix:
    lattice: Lattice
    mode: InteractionMode
    states: list[State]
    index: dict[State, int]
    matrix: sparse.csr_matrix

    @property
    def n_states(self) -> int:
        return len(self.states)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def exit_rates(self) -> np.ndarray:
        return -self.matrix.diagonal()

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def point_mass(self, field: OccupancyField) -> np.ndarray:
        p = np.zeros(self.n_states)
        p[self.index[_state_of(field)]] = 1.0
        return p


def _state_of(field: OccupancyField) -> State:
    return tuple((int(a), int(b)) for a, b in zip(field.a, field.b))


def _resolve(state: State, src: int, dst: int, mover_a: bool, mode: InteractionMode) -> State:
    s = [list(x) for x in state]
    c = 0 if mover_a else 1
    s[src][c] -= 1
    if mode is InteractionMode.TWO_TYPE_ANNIHILATE:
        other = 1 - c
        if s[dst][other] > 0:
            s[dst][other] -= 1
        else:
            s[dst][c] += 1
    elif mode is InteractionMode.SINGLE_TYPE_ANNIHILATE:
        if s[dst][1] > 0:
            s[dst][1] -= 1
        else:
            s[dst][1] += 1
    elif mode is InteractionMode.SINGLE_TYPE_COALESCE:
        if s[dst][1] == 0:
            s[dst][1] = 1
    else:
        s[dst][c] += 1
    return tuple((x[0], x[1]) for x in s)


def build_generator(initial, mode: InteractionMode,
                    max_states: int = MAX_STATES) -> GeneratorMatrix:
    """Enumerate configurations reachable from ``initial`` and their single-jump rates.

    ``initial`` is one field or a sequence of fields; states are numbered in
    discovery order, starting with the initial ones.

    Every particle jumps to each of its 2d neighbours at rate 1/2; on a side of length 2
    both directions along that axis lead to the same site and their rates add.
    """
    starts = [initial] if isinstance(initial, OccupancyField) else list(initial)
    lat = starts[0].lattice
    neighbors = [lat.neighbors(i) for i in range(lat.n_sites)]
    index: dict[State, int] = {}
    states: list[State] = []
    for f in starts:
        if f.lattice != lat:
            raise ValueError("initial fields live on different lattices")
        s0 = _state_of(f)
        if s0 not in index:
            index[s0] = len(states)
            states.append(s0)
    rows, cols, vals = [], [], []
    k = 0
    while k < len(states):
        s = states[k]
        out: dict[int, float] = {}
        for site, (na, nb) in enumerate(s):
            for mover_a, n in ((True, na), (False, nb)):
                if n == 0:
                    continue
                for dst in neighbors[site]:
                    nxt = _resolve(s, site, dst, mover_a, mode)
                    j = index.get(nxt)
                    if j is None:
                        j = len(states)
                        if j >= max_states:
                            raise StateSpaceOverflow(
                                f"more than {max_states} reachable states (stopped at {j})"
                            )
                        index[nxt] = j
                        states.append(nxt)
                    out[j] = out.get(j, 0.0) + 0.5 * n
        total = 0.0
        for j, rate in out.items():
            if j == k:
                continue
            rows.append(k)
            cols.append(j)
            vals.append(rate)
            total += rate
        rows.append(k)
        cols.append(k)
        vals.append(-total)
        k += 1
    n = len(states)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return GeneratorMatrix(lat, mode, states, index, mat)


def _truncation(mean: float, tol: float) -> int:
    return int(poisson.isf(tol, mean)) + 1 if mean > 0 else 0


def transient_distribution(gen: GeneratorMatrix, initial: np.ndarray, t: float,
                           tol: float = TV_TOLERANCE, extra_terms: int = 0) -> np.ndarray:
    """``initial @ exp(t G)`` by uniformization; dropped Poisson mass is below ``tol``."""
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    p0 = np.asarray(initial, dtype=np.float64)
    if abs(p0.sum() - 1.0) > 1e-12:
        raise ValueError("initial distribution must sum to 1")
    if t == 0:
        return p0.copy()
    rate = float(gen.exit_rates().max())
    if rate == 0:
        return p0.copy()
    jump = sparse.identity(gen.n_states, format="csr") + gen.matrix / rate
    jump_t = jump.T.tocsr()
    mean = rate * t
    kmax = _truncation(mean, tol) + extra_terms
    weights = poisson.pmf(np.arange(kmax + 1), mean)
    v = p0.copy()
    out = weights[0] * v
    for k in range(1, kmax + 1):
        v = jump_t @ v
        out += weights[k] * v
    return out


def oracle_marginal(gen: GeneratorMatrix, dist: np.ndarray, site: int, kind: str,
                    moment: int = 1) -> float:
    """Exact ``E[count^moment]`` of type ``'a'`` or ``'b'`` at ``site`` under ``dist``."""
    c = {"a": 0, "b": 1}[kind]
    vals = np.array([s[site][c] for s in gen.states], dtype=np.float64)
    return float(np.dot(dist, vals ** moment))


def marginal_table(gen: GeneratorMatrix, dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Means and variances of every (site, type) count, shape ``(n_sites, 2)``."""
    counts = np.array(gen.states, dtype=np.float64)  # (n_states, n_sites, 2)
    mean = np.einsum("s,sij->ij", dist, counts)
    second = np.einsum("s,sij->ij", dist, counts ** 2)
    return mean, second - mean ** 2
