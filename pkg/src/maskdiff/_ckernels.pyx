# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``maskdiff._pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY

cnp.import_array()


def cond_mi(p3, double floor=1e-15):
    cdef const double[:, :, ::1] p = np.ascontiguousarray(p3, dtype=np.float64)
    cdef Py_ssize_t na = p.shape[0], nx = p.shape[1], nc = p.shape[2]
    cdef Py_ssize_t a, x, c
    cdef double pa, pac, pabc, total = 0.0, skipped = 0.0
    cdef double[::1] pax = np.empty(nx)
    for a in range(na):
        pa = 0.0
        for x in range(nx):
            pax[x] = 0.0
            for c in range(nc):
                pax[x] += p[a, x, c]
            pa += pax[x]
        for c in range(nc):
            pac = 0.0
            for x in range(nx):
                pac += p[a, x, c]
            if pac < floor:
                skipped += pac
                continue
            for x in range(nx):
                pabc = p[a, x, c]
                if pabc > 0.0:
                    total += pabc * log((pabc * pa) / (pax[x] * pac))
    return total, skipped


def expected_kl(p3, double floor=1e-15):
    cdef const double[:, :, ::1] p = np.ascontiguousarray(p3, dtype=np.float64)
    cdef Py_ssize_t na = p.shape[0], nx = p.shape[1], nc = p.shape[2]
    cdef Py_ssize_t a, x, c
    cdef double pa, pac, bi, kl, total = 0.0, skipped = 0.0
    cdef double[::1] left = np.empty(nx)
    for a in range(na):
        pa = 0.0
        for x in range(nx):
            left[x] = 0.0
            for c in range(nc):
                left[x] += p[a, x, c]
            pa += left[x]
        if pa < floor:
            skipped += pa
            continue
        for x in range(nx):
            left[x] /= pa
        for c in range(nc):
            pac = 0.0
            for x in range(nx):
                pac += p[a, x, c]
            if pac < floor:
                skipped += pac
                continue
            kl = 0.0
            for x in range(nx):
                if p[a, x, c] > 0.0:
                    bi = p[a, x, c] / pac
                    kl += bi * log(bi / left[x])
            total += pac * kl
    return total, skipped


def monotone_path(score):
    cdef const double[:, ::1] s = np.ascontiguousarray(score, dtype=np.float64)
    cdef Py_ssize_t m = s.shape[0], n = s.shape[1], j, k
    if n > m:
        raise ValueError("need at least as many rows as columns")
    q_arr = np.full((m, n), -np.inf)
    cdef double[:, ::1] q = q_arr
    cdef double stay, move
    q[0, 0] = s[0, 0]
    for j in range(1, m):
        for k in range(n):
            stay = q[j - 1, k]
            move = q[j - 1, k - 1] if k > 0 else -INFINITY
            q[j, k] = (stay if stay >= move else move) + s[j, k]
    path_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] path = path_arr
    k = n - 1
    path[m - 1] = k
    for j in range(m - 1, 0, -1):
        if k > 0 and q[j - 1, k - 1] > q[j - 1, k]:
            k -= 1
        path[j - 1] = k
    return path_arr


def chain_joint(init, trans, emit, int n):
    cdef const double[::1] pi = np.ascontiguousarray(init, dtype=np.float64)
    cdef const double[:, ::1] A = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, ::1] E = np.ascontiguousarray(emit, dtype=np.float64)
    cdef Py_ssize_t h = A.shape[0], v = E.shape[1]
    cdef Py_ssize_t total = v ** n
    out_arr = np.empty(total, dtype=np.float64)
    cdef double[::1] out = out_arr
    # alpha[d] holds the forward vector after d+1 observations of the current prefix
    cdef double[:, ::1] alpha = np.zeros((n, h))
    cdef long long[::1] digits = np.zeros(n, dtype=np.int64)
    cdef Py_ssize_t idx, d, start, a, b
    cdef double acc
    start = 0
    for idx in range(total):
        for d in range(start, n):
            if d == 0:
                for b in range(h):
                    alpha[0, b] = pi[b] * E[b, digits[0]]
            else:
                for b in range(h):
                    acc = 0.0
                    for a in range(h):
                        acc += alpha[d - 1, a] * A[a, b]
                    alpha[d, b] = acc * E[b, digits[d]]
        acc = 0.0
        for b in range(h):
            acc += alpha[n - 1, b]
        out[idx] = acc
        # odometer increment; positions before `start` keep their forward vectors
        d = n - 1
        while d >= 0:
            digits[d] += 1
            if digits[d] < v:
                break
            digits[d] = 0
            d -= 1
        start = d if d > 0 else 0
    return out_arr


def top_p_rows(probs, double top_p, u):
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t r = p.shape[0], v = p.shape[1], i, j, k, t
    out_arr = np.empty(r, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef long long[::1] order = np.empty(v, dtype=np.int64)
    cdef double[::1] cum = np.empty(v)
    cdef long long tmp
    cdef double target
    for i in range(r):
        # insertion sort: descending probability, ties by lower id
        for j in range(v):
            order[j] = j
        for j in range(1, v):
            tmp = order[j]
            k = j - 1
            while k >= 0 and p[i, order[k]] < p[i, tmp]:
                order[k + 1] = order[k]
                k -= 1
            order[k + 1] = tmp
        cum[0] = p[i, order[0]]
        for j in range(1, v):
            cum[j] = cum[j - 1] + p[i, order[j]]
        k = 0
        while k < v - 1 and cum[k] < top_p:
            k += 1
        target = uu[i] * cum[k]
        t = 0
        while t < k and cum[t] <= target:
            t += 1
        out[i] = order[t]
    return out_arr

