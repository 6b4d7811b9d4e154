# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: exact greedy FPS variants and Hungarian assignment.

Mirrors ``_fallback.py`` one-to-one; the test suite checks both agree.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY, fabs

cnp.import_array()


def fps(coords, Py_ssize_t k, Py_ssize_t seed_index):
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t m = c.shape[0]
    out_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] out = out_arr
    dmin_arr = np.full(m, INFINITY)
    cdef double[::1] dmin = dmin_arr
    sel_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] sel = sel_arr
    cdef Py_ssize_t t, i, cur = seed_index, best
    cdef double dx, dy, dz, d, bestv
    for t in range(k):
        out[t] = cur
        sel[cur] = 1
        best = -1
        bestv = -INFINITY
        for i in range(m):
            dx = c[i, 0] - c[cur, 0]
            dy = c[i, 1] - c[cur, 1]
            dz = c[i, 2] - c[cur, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz)
            if d < dmin[i]:
                dmin[i] = d
            if not sel[i] and dmin[i] > bestv:
                bestv = dmin[i]
                best = i
        cur = best
    return out_arr


def weighted_fps(coords, weights, Py_ssize_t k):
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t m = c.shape[0]
    out_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] out = out_arr
    dmin_arr = np.full(m, INFINITY)
    cdef double[::1] dmin = dmin_arr
    sel_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] sel = sel_arr
    cdef Py_ssize_t t, i, cur = 0, best
    cdef double dx, dy, dz, d, bestv, s
    bestv = -INFINITY
    for i in range(m):
        if w[i] > bestv:
            bestv = w[i]
            cur = i
    for t in range(k):
        out[t] = cur
        sel[cur] = 1
        best = -1
        bestv = -INFINITY
        for i in range(m):
            dx = c[i, 0] - c[cur, 0]
            dy = c[i, 1] - c[cur, 1]
            dz = c[i, 2] - c[cur, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz)
            if d < dmin[i]:
                dmin[i] = d
            if not sel[i]:
                s = w[i] * dmin[i]
                if s > bestv:
                    bestv = s
                    best = i
        cur = best
    return out_arr


cdef double _solve_le(double[:, ::1] a, Py_ssize_t n, Py_ssize_t m, long long[::1] col_of_row):
    # requires n <= m
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, total
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(m + 1)
    p_arr = np.zeros(m + 1, dtype=np.int64)
    way_arr = np.zeros(m + 1, dtype=np.int64)
    minv_arr = np.empty(m + 1)
    used_arr = np.empty(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef long long[::1] p = p_arr
    cdef long long[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
    for i in range(n):
        col_of_row[i] = -1
    for j in range(1, m + 1):
        if p[j] != 0:
            col_of_row[p[j] - 1] = j - 1
    total = 0.0
    for i in range(n):
        total += a[i, col_of_row[i]]
    return total


cdef double _solve(double[:, ::1] a, long long[::1] row_to_col):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], r
    cdef double total
    if n == 0 or m == 0:
        for r in range(n):
            row_to_col[r] = -1
        return 0.0
    if n <= m:
        return _solve_le(a, n, m, row_to_col)
    cdef double[:, ::1] at = np.ascontiguousarray(np.asarray(a).T)
    ctr_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] ctr = ctr_arr
    total = _solve_le(at, m, n, ctr)
    for r in range(n):
        row_to_col[r] = -1
    for r in range(m):
        row_to_col[ctr[r]] = r
    return total


def solve(a):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    out = np.empty(arr.shape[0], dtype=np.int64)
    total = _solve(arr, out)
    return total, [int(x) for x in out]


def hungarian_lex(cost, double tol):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t k = c.shape[0], g = c.shape[1]
    assign_arr = np.full(k, -1, dtype=np.int64)
    cdef long long[::1] assign = assign_arr
    if k == 0 or g == 0:
        return [int(x) for x in assign_arr]
    cur_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] cur = cur_arr
    cdef double opt = _solve(c, cur)
    cdef Py_ssize_t npairs = k if k < g else g
    cdef double thresh = opt + tol * (fabs(opt) if fabs(opt) > 1.0 else 1.0)
    row_used_arr = np.zeros(k, dtype=np.uint8)
    col_used_arr = np.zeros(g, dtype=np.uint8)
    cdef unsigned char[::1] row_used = row_used_arr
    cdef unsigned char[::1] col_used = col_used_arr
    cdef double acc_cost = 0.0, val
    cdef Py_ssize_t naccepted = 0, q, cc, r, j, nr, nc, remaining, idx
    sub_arr = np.empty((k, g), dtype=np.float64)
    rows_arr = np.empty(k, dtype=np.int64)
    cols_arr = np.empty(g, dtype=np.int64)
    sa_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] rows = rows_arr
    cdef long long[::1] cols = cols_arr
    cdef long long[::1] sa = sa_arr
    cdef bint ok
    for q in range(k):
        if naccepted == npairs:
            break
        for cc in range(g):
            if col_used[cc]:
                continue
            if cur[q] == cc:
                ok = True
            else:
                nr = 0
                for r in range(k):
                    if not row_used[r] and r != q:
                        rows[nr] = r
                        nr += 1
                nc = 0
                for j in range(g):
                    if not col_used[j] and j != cc:
                        cols[nc] = j
                        nc += 1
                remaining = npairs - naccepted - 1
                if remaining > 0:
                    sub = np.ascontiguousarray(
                        np.asarray(c)[np.ix_(rows_arr[:nr], cols_arr[:nc])]
                    )
                    val = _solve(sub, sa[:nr])
                else:
                    val = 0.0
                    for r in range(nr):
                        sa[r] = -1
                ok = acc_cost + c[q, cc] + val <= thresh
                if ok:
                    for r in range(k):
                        if not row_used[r]:
                            cur[r] = -1
                    cur[q] = cc
                    for idx in range(nr):
                        if sa[idx] >= 0:
                            cur[rows[idx]] = cols[sa[idx]]
            if ok:
                assign[q] = cc
                row_used[q] = 1
                col_used[cc] = 1
                acc_cost += c[q, cc]
                naccepted += 1
                break
    return [int(x) for x in assign_arr]
