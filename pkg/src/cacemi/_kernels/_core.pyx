# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_fallback`` function by function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, sqrt

cnp.import_array()


cdef inline double _log_expit(double eta) nogil:
    if eta >= 0:
        return -log1p(exp(-eta))
    return eta - log1p(exp(eta))


cdef inline double _softplus(double eta) nogil:
    if eta > 0:
        return eta + log1p(exp(-eta))
    return log1p(exp(eta))


cdef inline double _outcome_logf(double y, double eta, double sigma, bint binary) nogil:
    cdef double r
    if binary:
        if y > 0.5:
            return _log_expit(eta)
        return _log_expit(-eta)
    r = (y - eta) / sigma
    return -0.5 * r * r


def crossprod(const double[:, ::1] X, const double[::1] w, const double[::1] y):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j, k
    xtx_arr = np.zeros((p, p))
    xty_arr = np.zeros(p)
    cdef double[:, ::1] xtx = xtx_arr
    cdef double[::1] xty = xty_arr
    cdef double wi, a
    with nogil:
        for i in range(n):
            wi = w[i]
            if wi == 0.0:
                continue
            for j in range(p):
                a = wi * X[i, j]
                xty[j] += a * y[i]
                for k in range(j + 1):
                    xtx[j, k] += a * X[i, k]
        for j in range(p):
            for k in range(j):
                xtx[k, j] = xtx[j, k]
    return xtx_arr, xty_arr


cdef double _loglik(const double[:, ::1] X, const double[::1] y, const double[::1] w,
                    const double[::1] beta) nogil:
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j
    cdef double eta, s = 0.0
    for i in range(n):
        if w[i] == 0.0:
            continue
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        s += w[i] * (y[i] * eta - _softplus(eta))
    return s


def logistic_loglik(const double[:, ::1] X, const double[::1] y, const double[::1] w,
                    const double[::1] beta):
    return _loglik(X, y, w, beta)


cdef bint _chol_solve(double[:, ::1] A, double[::1] b, double[:, ::1] L, double[::1] out) nogil:
    # Solves A x = b in place into ``out``; returns False if A is not PD.
    cdef Py_ssize_t p = A.shape[0], i, j, k
    cdef double s
    for j in range(p):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 1e-300:
            return False
        L[j, j] = sqrt(s)
        if L[j, j] <= 1e-150:
            return False
        for i in range(j + 1, p):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(p - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, p):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True


cdef double _evaluate(const double[:, ::1] X, const double[::1] y, const double[::1] w,
                      double[::1] beta, double[::1] score, double[:, ::1] info,
                      double* mx) nogil:
    # One pass: returns the log-likelihood, fills score and information.
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j, k
    cdef double eta, e, pr, r, v, a, ll = 0.0
    for j in range(p):
        score[j] = 0.0
        for k in range(p):
            info[j, k] = 0.0
    for i in range(n):
        if w[i] == 0.0:
            continue
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        if eta > 0:
            e = exp(-eta)
            pr = 1.0 / (1.0 + e)
            ll += w[i] * (y[i] * eta - eta - log1p(e))
        else:
            e = exp(eta)
            pr = e / (1.0 + e)
            ll += w[i] * (y[i] * eta - log1p(e))
        r = w[i] * (y[i] - pr)
        v = w[i] * pr * (1.0 - pr)
        for j in range(p):
            score[j] += X[i, j] * r
            a = v * X[i, j]
            for k in range(j + 1):
                info[j, k] += a * X[i, k]
    mx[0] = 0.0
    for j in range(p):
        for k in range(j):
            info[k, j] = info[j, k]
        if fabs(score[j]) > mx[0]:
            mx[0] = fabs(score[j])
    return ll


def irls_logistic(const double[:, ::1] X, const double[::1] y, const double[::1] w,
                  start, int max_iter, double score_tol, double rel_tol):
    cdef Py_ssize_t p = X.shape[1], j
    beta_arr = np.array(start, dtype=np.float64, copy=True)
    new_arr = np.empty(p)
    step_arr = np.empty(p)
    score_arr = np.empty(p)
    info_arr = np.empty((p, p))
    score2_arr = np.empty(p)
    info2_arr = np.empty((p, p))
    L_arr = np.zeros((p, p))
    cdef double[::1] beta = beta_arr
    cdef double[::1] new = new_arr
    cdef double[::1] step = step_arr
    cdef double[::1] score = score_arr
    cdef double[:, ::1] info = info_arr
    cdef double[::1] score2 = score2_arr
    cdef double[:, ::1] info2 = info2_arr
    cdef double[:, ::1] L = L_arr
    cdef double ll, ll_new, rel, mx, mx_new
    cdef int it, iterations = 0, halvings
    cdef bint converged = False, ok = True
    with nogil:
        ll = _evaluate(X, y, w, beta, score, info, &mx)
        for it in range(1, max_iter + 1):
            if mx < score_tol:
                converged = True
                break
            if not _chol_solve(info, score, L, step):
                ok = False
                break
            iterations = it
            for j in range(p):
                new[j] = beta[j] + step[j]
            ll_new = _evaluate(X, y, w, new, score2, info2, &mx_new)
            halvings = 0
            while ll_new < ll - 1e-12 * fabs(ll) and halvings < 30:
                for j in range(p):
                    step[j] *= 0.5
                    new[j] = beta[j] + step[j]
                ll_new = _evaluate(X, y, w, new, score2, info2, &mx_new)
                halvings += 1
            rel = fabs(ll_new - ll) / (fabs(ll) if fabs(ll) > 1e-300 else 1e-300)
            beta[:] = new
            score[:] = score2
            info[:, :] = info2
            ll = ll_new
            mx = mx_new
            if rel < rel_tol:
                converged = True
                break
    return beta_arr, info_arr, ll, iterations, bool(converged), mx, bool(ok)


def class_posterior(const double[::1] y, const double[::1] eta1, const double[::1] eta0,
                    const double[::1] pi, double sigma, bint binary):
    cdef Py_ssize_t n = y.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double a, b, m, ea
    with nogil:
        for i in range(n):
            a = log(pi[i]) + _outcome_logf(y[i], eta1[i], sigma, binary)
            b = log1p(-pi[i]) + _outcome_logf(y[i], eta0[i], sigma, binary)
            m = a if a > b else b
            ea = exp(a - m)
            out[i] = ea / (ea + exp(b - m))
    return out_arr


def rejection_round(const double[::1] y, const double[::1] eta1, const double[::1] eta0,
                    const double[::1] pi, double sigma, bint binary,
                    const double[:, :, ::1] u):
    cdef Py_ssize_t n = u.shape[0], k = u.shape[1], i, j
    cls_arr = np.full(n, -1, dtype=np.int8)
    att_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int8_t[::1] cls = cls_arr
    cdef cnp.int64_t[::1] att = att_arr
    cdef double lf1, lf0, lmax, r1, r0, ratio
    cdef bint prop
    with nogil:
        for i in range(n):
            lf1 = _outcome_logf(y[i], eta1[i], sigma, binary)
            lf0 = _outcome_logf(y[i], eta0[i], sigma, binary)
            lmax = lf1 if lf1 > lf0 else lf0
            r1 = exp(lf1 - lmax)
            r0 = exp(lf0 - lmax)
            att[i] = k
            for j in range(k):
                prop = u[i, j, 0] < pi[i]
                ratio = r1 if prop else r0
                if u[i, j, 1] < ratio:
                    cls[i] = 1 if prop else 0
                    att[i] = j + 1
                    break
    return cls_arr, att_arr
