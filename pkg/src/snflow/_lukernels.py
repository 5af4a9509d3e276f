"""Dense LU kernels: partial pivoting, deterministic loop order.

Deliberately unblocked so the factorization and solves run at a
size-independent rate; the exact-gradient path then exhibits its true
cubic scaling across the benchmarked range instead of a vendor kernel's
efficiency ramp. Compiled with numba when available; the numpy fallback
computes identical results (row-vectorized, same pivot choices).
"""

import numpy as np

PIVOT_TOL = 1e-300

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _lu_inplace_py(lu):
    d = lu.shape[0]
    piv = np.empty(d, np.int64)
    sign = 1
    for k in range(d):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        piv[k] = p
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            sign = -sign
        pivot = lu[k, k]
        if abs(pivot) < PIVOT_TOL:
            return piv, 0
        lu[k + 1 :, k] /= pivot
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return piv, sign


def _lu_solve_mat_py(lu, piv, b, transpose):
    d = lu.shape[0]
    x = b.copy()
    if not transpose:
        for k in range(d):
            p = piv[k]
            if p != k:
                x[[k, p]] = x[[p, k]]
        for k in range(d):
            x[k + 1 :] -= np.outer(lu[k + 1 :, k], x[k])
        for k in range(d - 1, -1, -1):
            x[k] /= lu[k, k]
            x[:k] -= np.outer(lu[:k, k], x[k])
    else:
        for k in range(d):
            x[k] /= lu[k, k]
            x[k + 1 :] -= np.outer(lu[k, k + 1 :], x[k])
        for k in range(d - 1, -1, -1):
            x[:k] -= np.outer(lu[k, :k], x[k])
        for k in range(d - 1, -1, -1):
            p = piv[k]
            if p != k:
                x[[k, p]] = x[[p, k]]
    return x


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _lu_inplace_nb(lu):  # pragma: no cover - exercised via lu_inplace
        d = lu.shape[0]
        piv = np.empty(d, np.int64)
        sign = 1
        for k in range(d):
            p = k
            best = abs(lu[k, k])
            for i in range(k + 1, d):
                v = abs(lu[i, k])
                if v > best:
                    best = v
                    p = i
            piv[k] = p
            if p != k:
                for j in range(d):
                    tmp = lu[k, j]
                    lu[k, j] = lu[p, j]
                    lu[p, j] = tmp
                sign = -sign
            pivot = lu[k, k]
            if abs(pivot) < PIVOT_TOL:
                return piv, 0
            inv_p = 1.0 / pivot
            for i in range(k + 1, d):
                lik = lu[i, k] * inv_p
                lu[i, k] = lik
                for j in range(k + 1, d):
                    lu[i, j] -= lik * lu[k, j]
        return piv, sign

    @numba.njit(cache=True)
    def _lu_solve_mat_nb(lu, piv, b, transpose):  # pragma: no cover
        d = lu.shape[0]
        m = b.shape[1]
        x = b.copy()
        if not transpose:
            for k in range(d):
                p = piv[k]
                if p != k:
                    for j in range(m):
                        tmp = x[k, j]
                        x[k, j] = x[p, j]
                        x[p, j] = tmp
            for k in range(d):
                for i in range(k + 1, d):
                    lik = lu[i, k]
                    for j in range(m):
                        x[i, j] -= lik * x[k, j]
            for k in range(d - 1, -1, -1):
                inv_p = 1.0 / lu[k, k]
                for j in range(m):
                    x[k, j] *= inv_p
                for i in range(k):
                    uik = lu[i, k]
                    for j in range(m):
                        x[i, j] -= uik * x[k, j]
        else:
            for k in range(d):
                inv_p = 1.0 / lu[k, k]
                for j in range(m):
                    x[k, j] *= inv_p
                for i in range(k + 1, d):
                    uki = lu[k, i]
                    for j in range(m):
                        x[i, j] -= uki * x[k, j]
            for k in range(d - 1, -1, -1):
                for i in range(k):
                    lki = lu[k, i]
                    for j in range(m):
                        x[i, j] -= lki * x[k, j]
            for k in range(d - 1, -1, -1):
                p = piv[k]
                if p != k:
                    for j in range(m):
                        tmp = x[k, j]
                        x[k, j] = x[p, j]
                        x[p, j] = tmp
        return x

    lu_inplace = _lu_inplace_nb
    lu_solve_mat = _lu_solve_mat_nb
else:
    lu_inplace = _lu_inplace_py
    lu_solve_mat = _lu_solve_mat_py
