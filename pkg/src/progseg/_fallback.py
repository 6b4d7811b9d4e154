"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled path is benchmarked against. Semantics are identical
to ``_kernels.pyx``.
"""
import math

import numpy as np

INF = math.inf


def fps(coords, k, seed_index):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    m = coords.shape[0]
    out = np.empty(k, dtype=np.int64)
    dmin = np.full(m, INF)
    selected = np.zeros(m, dtype=bool)
    cur = seed_index
    for t in range(k):
        out[t] = cur
        selected[cur] = True
        d = np.sqrt(((coords - coords[cur]) ** 2).sum(axis=1))
        np.minimum(dmin, d, out=dmin)
        if t + 1 == k:
            break
        score = np.where(selected, -INF, dmin)
        cur = int(np.argmax(score))
    return out


def weighted_fps(coords, weights, k):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    m = coords.shape[0]
    out = np.empty(k, dtype=np.int64)
    dmin = np.full(m, INF)
    selected = np.zeros(m, dtype=bool)
    cur = int(np.argmax(weights))
    for t in range(k):
        out[t] = cur
        selected[cur] = True
        d = np.sqrt(((coords - coords[cur]) ** 2).sum(axis=1))
        np.minimum(dmin, d, out=dmin)
        if t + 1 == k:
            break
        score = np.where(selected, -INF, weights * dmin)
        cur = int(np.argmax(score))
    return out


def _solve_rows_le_cols(a):
    """Shortest-augmenting-path Hungarian for an n x m matrix with n <= m.

    Returns (total, col_of_row).
    """
    n, m = a.shape
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    rows = [None] + [list(map(float, a[i])) for i in range(n)]
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = rows[i0]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
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
    col_of_row = [-1] * n
    for j in range(1, m + 1):
        if p[j] != 0:
            col_of_row[p[j] - 1] = j - 1
    total = 0.0
    for i in range(n):
        total += float(a[i, col_of_row[i]])
    return total, col_of_row


def solve(a):
    """Optimal rectangular assignment. Returns (total, row->col list, -1 if unmatched)."""
    n, m = a.shape
    if n == 0 or m == 0:
        return 0.0, [-1] * n
    if n <= m:
        return _solve_rows_le_cols(a)
    total, col_to_row = _solve_rows_le_cols(a.T)
    row_to_col = [-1] * n
    for c, r in enumerate(col_to_row):
        row_to_col[r] = c
    return total, row_to_col


def hungarian_lex(cost, tol):
    """Minimum-cost assignment; among optima the lexicographically smallest pair list.

    Greedy over pairs (q, g) in lexicographic order: a pair is accepted if some
    optimal assignment contains it together with everything accepted so far.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    k, g = cost.shape
    assign = [-1] * k
    if k == 0 or g == 0:
        return assign
    opt, cur = solve(cost)
    npairs = min(k, g)
    thresh = opt + tol * max(1.0, abs(opt))
    row_used = [False] * k
    col_used = [False] * g
    acc_cost = 0.0
    naccepted = 0
    for q in range(k):
        if naccepted == npairs:
            break
        for c in range(g):
            if col_used[c]:
                continue
            if cur[q] == c:
                ok = True
                sub_assign = None
            else:
                rows = [r for r in range(k) if not row_used[r] and r != q]
                cols = [j for j in range(g) if not col_used[j] and j != c]
                remaining = npairs - naccepted - 1
                if remaining > 0:
                    sub = cost[np.ix_(rows, cols)]
                    val, sa = solve(sub)
                else:
                    val, sa = 0.0, [-1] * len(rows)
                ok = acc_cost + cost[q, c] + val <= thresh
                sub_assign = (rows, cols, sa)
            if ok:
                assign[q] = c
                row_used[q] = True
                col_used[c] = True
                acc_cost += cost[q, c]
                naccepted += 1
                if sub_assign is not None:
                    rows, cols, sa = sub_assign
                    new = [-1] * k
                    for r in range(k):
                        if row_used[r]:
                            new[r] = assign[r]
                    for idx, r in enumerate(rows):
                        if sa[idx] >= 0:
                            new[r] = cols[sa[idx]]
                    cur = new
                break
    return assign
