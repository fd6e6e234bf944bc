"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_core.pyx`` with the same signature and
the same arithmetic, so both backends produce the same numbers (up to
floating-point summation order) for the same inputs, including the same
pre-drawn uniforms.
"""

import numpy as np

def _log_expit(eta):
    # log(1 / (1 + exp(-eta))), stable for both tails
    return -np.logaddexp(0.0, -eta)


def _outcome_logf(y, eta, sigma, binary):
    if binary:
        return np.where(y > 0.5, _log_expit(eta), _log_expit(-eta))
    r = (y - eta) / sigma
    return -0.5 * r * r


def crossprod(X, w, y):
    """Return ``(X' W X, X' W y)`` for diagonal weights ``w``."""
    Xw = X * w[:, None]
    return Xw.T @ X, Xw.T @ y


def logistic_loglik(X, y, w, beta):
    """Weighted Bernoulli log-likelihood under the logit link."""
    eta = X @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _chol_solve(A, b):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(L) <= 1e-150):
        return None
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def _evaluate(X, y, w, beta):
    eta = X @ beta
    ll = float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))
    p = np.exp(_log_expit(eta))
    score = X.T @ (w * (y - p))
    info = (X * (w * p * (1.0 - p))[:, None]).T @ X
    return ll, score, info


def irls_logistic(X, y, w, start, max_iter, score_tol, rel_tol):
    """Newton/IRLS for weighted logistic regression.

    Returns ``(beta, info, loglik, iterations, converged, max_score, ok)``
    where ``info`` is the observed information at ``beta`` and ``ok`` is
    False if the information matrix was not positive definite.
    """
    beta = np.array(start, dtype=float, copy=True)
    ll, score, info = _evaluate(X, y, w, beta)
    converged = False
    iterations = 0
    ok = True
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < score_tol:
            converged = True
            break
        step = _chol_solve(info, score)
        if step is None:
            ok = False
            break
        iterations = it
        new = beta + step
        ll_new, score_new, info_new = _evaluate(X, y, w, new)
        halvings = 0
        while ll_new < ll - 1e-12 * abs(ll) and halvings < 30:
            step = step * 0.5
            new = beta + step
            ll_new, score_new, info_new = _evaluate(X, y, w, new)
            halvings += 1
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        beta, ll, score, info = new, ll_new, score_new, info_new
        if rel < rel_tol:
            converged = True
            break
    return beta, info, ll, iterations, converged, float(np.max(np.abs(score))), ok


def class_posterior(y, eta1, eta0, pi, sigma, binary):
    """P(C=1 | y) for a two-component outcome mixture.

    ``eta1``/``eta0`` are per-record linear predictors under C=1 and C=0;
    ``pi`` is the per-record prior complier probability.
    """
    lf1 = _outcome_logf(y, eta1, sigma, binary)
    lf0 = _outcome_logf(y, eta0, sigma, binary)
    a = np.log(pi) + lf1
    b = np.log1p(-pi) + lf0
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    return ea / (ea + np.exp(b - m))


def rejection_round(y, eta1, eta0, pi, sigma, binary, u):
    """Run up to ``u.shape[1]`` rejection attempts per record.

    Attempt ``j`` for record ``i`` proposes ``C* = 1`` iff ``u[i, j, 0] < pi[i]``
    and accepts iff ``u[i, j, 1] < f(y | C*) / max(f1, f0)``.

    Returns ``(cls, attempts)``: ``cls`` is 1/0 for accepted records and -1
    where every attempt was rejected; ``attempts`` counts proposals used.
    """
    n, k = u.shape[0], u.shape[1]
    lf1 = _outcome_logf(y, eta1, sigma, binary)
    lf0 = _outcome_logf(y, eta0, sigma, binary)
    lmax = np.maximum(lf1, lf0)
    r1 = np.exp(lf1 - lmax)
    r0 = np.exp(lf0 - lmax)
    prop = u[:, :, 0] < pi[:, None]
    ratio = np.where(prop, r1[:, None], r0[:, None])
    acc = u[:, :, 1] < ratio
    any_acc = acc.any(axis=1)
    first = np.argmax(acc, axis=1)
    cls = np.full(n, -1, dtype=np.int8)
    idx = np.nonzero(any_acc)[0]
    cls[idx] = prop[idx, first[idx]].astype(np.int8)
    attempts = np.where(any_acc, first + 1, k).astype(np.int64)
    return cls, attempts
