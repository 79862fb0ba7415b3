"""Minimum-cost bipartite assignment (Kuhn-Munkres with row/column potentials).

Rectangular matrices are padded with constant rows or columns to a square
problem; a constant pad does not change which real pairs are optimal.
Among several optimal assignments the lexicographically smallest row->column
map is returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Assignment:
    """``cols[i]`` is the column assigned to row ``i`` (-1 if the row is unmatched)."""

    cols: np.ndarray
    cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.cols) if j >= 0]

    def inverse(self, n_cols: int) -> np.ndarray:
        rows = np.full(n_cols, -1, dtype=np.intp)
        for i, j in self.pairs:
            rows[j] = i
        return rows


def _kuhn_munkres(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Square solve; returns (row->col, row potentials u, column potentials v)."""
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.intp)  # column -> row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.intp)
    cols[owner[1:] - 1] = np.arange(n)
    return cols, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Smallest row->col map among perfect matchings of the tight-edge graph."""
    n = len(cols)
    cols = cols.copy()
    owner = np.empty(n, dtype=np.intp)
    owner[cols] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    for i in range(n):
        for j in adj[i]:
            if j >= cols[i]:
                break
            r = owner[j]
            if r < i:
                continue
            # re-route row r onto the column row i gives up, via rows > i
            target = cols[i]
            parent = {r: (-1, -1)}
            queue = [r]
            found = None
            while queue and found is None:
                row = queue.pop(0)
                for c in adj[row]:
                    if c == j:
                        continue
                    if c == target:
                        found = (row, c)
                        break
                    nxt = owner[c]
                    if nxt > i and nxt not in parent:
                        parent[nxt] = (row, c)
                        queue.append(nxt)
            if found is None:
                continue
            row, c = found
            while row != -1:
                prev_row, prev_c = parent[row]
                cols[row] = c
                owner[c] = row
                row, c = prev_row, prev_c
            cols[i] = j
            owner[j] = i
            break
    return cols


def solve(cost) -> Assignment:
    """Globally optimal assignment for an n x m cost matrix."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ContractError(f"cost matrix must be a non-empty 2-D array, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")
    n, m = c.shape
    size = max(n, m)
    sq = np.zeros((size, size))
    sq[:n, :m] = c
    cols, u, v = _kuhn_munkres(sq)
    reduced = sq - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    cols = _lexicographic(reduced <= tol, cols)
    cols = cols[:n].copy()
    cols[cols >= m] = -1
    matched = cols >= 0
    total = float(c[np.flatnonzero(matched), cols[matched]].sum())
    return Assignment(cols=cols, cost=total)


def brute_force(cost) -> Assignment:
    """Exhaustive search over injections; small matrices only.

    Uses the same tie-break as :func:`solve`: the smallest row->column map,
    where an unmatched row ranks after every column.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    best_key, best_cols, best_cost = None, None, np.inf
    if n <= m:
        candidates = (np.asarray(p, dtype=np.intp) for p in permutations(range(m), n))
    else:
        def tall():
            for rows in permutations(range(n), m):
                cols = np.full(n, -1, dtype=np.intp)
                cols[list(rows)] = np.arange(m)
                yield cols
        candidates = tall()
    for cols in candidates:
        matched = cols >= 0
        total = float(c[np.flatnonzero(matched), cols[matched]].sum())
        key = tuple(int(j) if j >= 0 else m for j in cols)
        if total < best_cost or (total == best_cost and key < best_key):
            best_key, best_cols, best_cost = key, cols, total
    return Assignment(cols=best_cols, cost=best_cost)
