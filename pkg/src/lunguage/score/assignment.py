"""Maximum-weight partial matching with a deterministic tie-break.

The optimum comes from the Hungarian solver in scipy. Among all matchings
that reach it, the one whose sorted ``(row, col)`` sequence is
lexicographically smallest is returned, so results do not depend on solver
internals.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..validation import check_score_matrix

Pairs = list[tuple[int, int]]


def _solve(w: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[float, dict[int, int]]:
    """Optimal value and positive-weight matching on a submatrix."""
    if rows.size == 0 or cols.size == 0:
        return 0.0, {}
    sub = w[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    keep = sub[r, c] > 0
    match = {int(rows[i]): int(cols[j]) for i, j in zip(r[keep], c[keep])}
    return math.fsum(sub[r[keep], c[keep]]), match


def _tolerance(best: float) -> float:
    # relative, so tiny but distinct totals are never treated as ties
    return 1e-11 * best


def assign(scores, match_threshold: float = 0.0) -> Pairs:
    """Optimal one-to-one partial matching of rows to columns.

    Cells at or below ``match_threshold`` never form a match. Returns the
    matched pairs sorted by row.
    """
    s = check_score_matrix(scores)
    w = np.where(s > match_threshold, s, 0.0)
    n, m = w.shape
    if n == 0 or m == 0 or not w.any():
        return []

    best, completion = _solve(w, np.arange(n), np.arange(m))
    tol = _tolerance(best)
    free = np.ones(m, dtype=bool)
    chosen: Pairs = []
    acc = 0.0
    for i in range(n):
        remaining = best - acc
        later = np.arange(i + 1, n)
        free_cols = np.flatnonzero(free)
        c_star = completion.get(i)
        # the current completion proves c_star feasible; only smaller
        # columns can beat it lexicographically
        candidates = [j for j in free_cols if w[i, j] > 0 and (c_star is None or j < c_star)]
        picked = None
        if candidates:
            # value of the later rows with row i left out bounds every
            # completion that also drops one more column
            without_i, without_i_match = _solve(w, later, free_cols)
            for j in candidates:
                if w[i, j] + without_i < remaining - tol:
                    continue
                val, match = _solve(w, later, free_cols[free_cols != j])
                if w[i, j] + val >= remaining - tol:
                    picked, completion = j, match
                    break
            if picked is None and c_star is None:
                completion = without_i_match
        if picked is None and c_star is not None:
            picked = c_star
            completion = {r: c for r, c in completion.items() if r != i}
        if picked is not None:
            chosen.append((i, int(picked)))
            free[picked] = False
            acc = math.fsum(w[r, c] for r, c in chosen)
    return chosen


def matching_value(scores, pairs: Pairs) -> float:
    s = np.asarray(scores, dtype=float)
    return math.fsum(s[r, c] for r, c in pairs)
