"""Optimal bipartite assignment.

:func:`hungarian_min` is a shortest-augmenting-path Hungarian solver with a
deterministic tie-break: among all optimal mappings it returns the
lexicographically smallest. It is used for adjacent-frame query matching and
for label-to-prediction matching. :func:`brute_force_min` is the exhaustive
oracle it is tested against.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InfeasibleError

log = logging.getLogger(__name__)

METRICS = ("cosine", "negative-dot")


@dataclass(frozen=True)
class Assignment:
    """``mapping[i]`` is the column assigned to row ``i``."""

    mapping: np.ndarray
    total_cost: float

    def __post_init__(self):
        object.__setattr__(self, "mapping", np.asarray(self.mapping, dtype=np.intp))


def _prepare(cost) -> tuple[np.ndarray, np.ndarray]:
    c = np.array(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise DimensionError(f"cost matrix has more rows than columns: {c.shape}")
    if np.isnan(c).any():
        raise ValueError("cost matrix contains NaN")
    if (c == -np.inf).any():
        raise ValueError("cost matrix contains -inf")
    forbidden = np.isinf(c)
    if forbidden.all(axis=1).any():
        raise InfeasibleError("a row has no finite entry")
    if forbidden.any():
        finite = c[~forbidden]
        lo, hi = finite.min(), finite.max()
        # Any mapping touching a forbidden pair costs more than every feasible one.
        c[forbidden] = hi + n * (hi - lo) + 1.0
    return c, forbidden


def _solve_square(a: list[list[float]], n: int) -> tuple[list[int], list[float], list[float]]:
    """Hungarian algorithm on an n x n matrix; returns row->col and duals u, v."""
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-based, 0 = none)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_min(match: list[int], tight: list[list[int]], rows: int) -> list[int]:
    """Smallest perfect matching (row-major lexicographic) in the tight-edge graph.

    ``match`` is a perfect matching using only tight edges. Row by row, try
    smaller tight columns and keep one whenever an alternating cycle through
    the not-yet-fixed rows lets the rest of the matching absorb the change.
    """
    n = len(match)
    owner = [0] * n
    for r, c in enumerate(match):
        owner[c] = r

    for i in range(rows):
        for j in tight[i]:
            if j >= match[i]:
                break
            target = match[i]
            start = owner[j]
            if start < i:
                continue
            # DFS over rows > i for an alternating path start -> ... -> column `target`.
            parent: dict[int, tuple[int, int]] = {}
            stack = [start]
            seen_rows = {start}
            found = None
            while stack and found is None:
                r = stack.pop()
                for c in tight[r]:
                    if c == match[r]:
                        continue
                    if c == target:
                        found = (r, c)
                        break
                    nr = owner[c]
                    if nr > i and nr not in seen_rows:
                        seen_rows.add(nr)
                        parent[nr] = (r, c)
                        stack.append(nr)
            if found is None:
                continue
            r, c = found
            while True:
                match[r], owner[c] = c, r
                if r == start:
                    break
                r, c = parent[r]
            match[i], owner[j] = j, i
            break
    return match


def hungarian_min(cost) -> Assignment:
    """Minimum-cost injective row->column mapping for an n x m matrix, n <= m.

    ``+inf`` entries are forbidden pairs. Ties between optimal mappings are
    broken towards the lexicographically smallest mapping.
    """
    c, forbidden = _prepare(cost)
    n, m = c.shape
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.intp), 0.0)
    if n < m:
        # Constant dummy rows absorb the unused columns without biasing real rows.
        fill = 10.0 * max(float(np.abs(c).max()), 1.0)
        c = np.vstack([c, np.full((m - n, m), fill)])
    a = c.tolist()
    match, u, v = _solve_square(a, m)
    scale = max(1.0, float(np.abs(c).max()))
    tol = 1e-10 * scale
    reduced = c - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    tight = [np.flatnonzero(reduced[r] <= tol).tolist() for r in range(m)]
    for r in range(m):
        if match[r] not in tight[r]:
            tight[r] = sorted(tight[r] + [match[r]])
    match = _lexicographic_min(match, tight, n)
    mapping = np.asarray(match[:n], dtype=np.intp)
    if forbidden[np.arange(n), mapping].any():
        raise InfeasibleError("no assignment avoids the forbidden pairs")
    original = np.asarray(cost, dtype=np.float64)
    return Assignment(mapping, float(original[np.arange(n), mapping].sum()))


def brute_force_min(cost) -> Assignment:
    """Exhaustive oracle: first minimum in lexicographic enumeration order."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    best, best_map = np.inf, None
    rows = range(n)
    for perm in itertools.permutations(range(m), n):
        total = sum(c[i, perm[i]] for i in rows)
        if total < best:
            best, best_map = total, perm
    if best_map is None or not np.isfinite(best):
        raise InfeasibleError("no assignment avoids the forbidden pairs")
    return Assignment(np.asarray(best_map), float(best))


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def cosine_cost(A, B) -> np.ndarray:
    """cost[i, j] = 1 - cos(A_i, B_j); zero-norm rows get similarity 0 (cost 1)."""
    A, B = _as_array(A), _as_array(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"cosine_cost: shapes {A.shape} and {B.shape} are incompatible")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if (na == 0).any() or (nb == 0).any():
        log.warning(
            "cosine_cost: %d zero-norm row(s) treated as similarity 0",
            int((na == 0).sum() + (nb == 0).sum()),
        )
    sa = np.where(na > 0, na, 1.0)
    sb = np.where(nb > 0, nb, 1.0)
    sim = (A / sa[:, None]) @ (B / sb[:, None]).T
    return 1.0 - sim


def pairwise_cost(A, B, metric: str = "cosine") -> np.ndarray:
    if metric == "cosine":
        return cosine_cost(A, B)
    if metric == "negative-dot":
        return -(_as_array(A) @ _as_array(B).T)
    raise ValueError(f"unknown matching metric {metric!r}; expected one of {METRICS}")


def match_adjacent(prev_matched, cur, metric: str = "cosine") -> tuple[np.ndarray, np.ndarray]:
    """Reorder ``cur`` so row n continues the instance held by ``prev_matched[n]``.

    Returns ``(cur[perm], perm)``. With ``prev_matched=None`` (first frame)
    the input is returned unchanged with the identity permutation.
    """
    cur = _as_array(cur)
    if prev_matched is None:
        return cur, np.arange(cur.shape[0])
    prev = _as_array(prev_matched)
    if prev.shape != cur.shape:
        raise DimensionError(f"match_adjacent: {prev.shape} vs {cur.shape}")
    perm = hungarian_min(pairwise_cost(prev, cur, metric)).mapping
    return cur[perm], perm
