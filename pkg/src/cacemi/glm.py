"""Weighted linear and logistic regression, plus a numerical Hessian.

Weights are frequency-style: a fit with integer weight ``k`` on a row is
the same as ``k`` copies of that row. Zero-weight rows are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import NumericalError, SingularDesignError

RANK_TOL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FitResult:
    coef: np.ndarray
    vcov: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    names: tuple[str, ...] = ()
    sigma: float | None = None  # residual SD (df-corrected), linear fits only
    sigma_ml: float | None = None
    df_resid: float = math.inf
    info: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)
    trace: list[float] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])


def _prepare(X, y, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if w is None:
        w = np.ones(len(y))
    else:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
    if X.shape[0] != len(y) or len(w) != len(y):
        raise ValueError("X, y and w have inconsistent lengths")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y[w > 0])):
        raise NumericalError("non-finite values in design or response")
    return X, y, w


def check_rank(xtx: np.ndarray) -> None:
    """Raise :class:`SingularDesignError` if ``xtx`` is numerically rank deficient.

    Uses a pivoted Cholesky of the unit-diagonal rescaling of ``xtx``.
    """
    p = xtx.shape[0]
    dg = np.diag(xtx)
    if np.any(dg <= 0):
        bad = [int(i) for i in np.nonzero(dg <= 0)[0]]
        raise SingularDesignError(f"design column(s) {bad} carry no weight")
    s = 1.0 / np.sqrt(dg)
    r = xtx * s[:, None] * s[None, :]
    _, _, rank, info = linalg.lapack.dpstrf(r, tol=RANK_TOL)
    if rank < p:
        raise SingularDesignError(f"design matrix has rank {rank} < {p} columns")


def fit_linear(X, y, w=None, names: Sequence[str] = ()) -> FitResult:
    """Weighted least squares.

    ``vcov`` is ``sigma^2 (X'WX)^{-1}`` with ``sigma^2`` the weighted residual
    sum of squares over ``sum(w) - p``; ``loglik`` is the Gaussian
    log-likelihood at the ML variance.
    """
    X, y, w = _prepare(X, y, w)
    keep = w > 0
    Xk, yk, wk = X[keep], y[keep], w[keep]
    p = X.shape[1]
    xtx, xty = _kernels.crossprod(Xk, wk, yk)
    check_rank(xtx)
    cf = linalg.cho_factor(xtx)
    coef = linalg.cho_solve(cf, xty)
    r = yk - Xk @ coef
    sw = float(wk.sum())
    rss = float(np.dot(wk, r * r))
    df = sw - p
    s2_ml = rss / sw
    s2 = rss / df if df > 0 else math.nan
    inv = linalg.cho_solve(cf, np.eye(p))
    if s2_ml > 0:
        loglik = -0.5 * sw * (LOG_2PI + math.log(s2_ml) + 1.0)
    else:
        loglik = math.inf
    return FitResult(
        coef=coef, vcov=s2 * inv, loglik=loglik, converged=True, iterations=1,
        names=tuple(names), sigma=math.sqrt(s2) if df > 0 else math.nan,
        sigma_ml=math.sqrt(s2_ml), df_resid=df, info=xtx,
    )


def fit_logistic(X, y, w=None, names: Sequence[str] = (), start=None,
                 max_iter: int = 100) -> FitResult:
    """Maximum-likelihood logistic regression by IRLS from zero coefficients.

    ``y`` may be fractional in [0, 1] (EM pseudo-responses). Converges when
    the max-abs score drops below 1e-8 or the relative log-likelihood change
    below 1e-10. A separation warning is attached when a coefficient
    exceeds 30 in magnitude.
    """
    X, y, w = _prepare(X, y, w)
    if np.any((y[w > 0] < 0) | (y[w > 0] > 1)):
        raise ValueError("logistic response must lie in [0, 1]")
    keep = w > 0
    Xk, yk, wk = X[keep], y[keep], w[keep]
    p = X.shape[1]
    if start is None:
        start = np.zeros(p)
    xtx, _ = _kernels.crossprod(Xk, wk, yk)
    check_rank(xtx)
    coef, info, ll, iters, converged, max_score, ok = _kernels.irls_logistic(
        Xk, yk, wk, start, max_iter, 1e-8, 1e-10)
    if not ok:
        raise SingularDesignError("information matrix not positive definite during IRLS")
    warns = []
    if not converged:
        warns.append(f"IRLS did not converge in {max_iter} iterations (max score {max_score:.3g})")
    if np.max(np.abs(coef)) > 30:
        warns.append("separation: coefficient magnitude exceeds 30; estimates may be infinite")
    try:
        vcov = linalg.inv(info)
    except linalg.LinAlgError:
        vcov = np.full((p, p), np.nan)
        warns.append("information matrix singular at the optimum")
    return FitResult(coef=np.asarray(coef), vcov=vcov, loglik=float(ll), converged=bool(converged),
                     iterations=int(iters), names=tuple(names), df_resid=float(wk.sum()) - p,
                     info=info, warnings=warns)


def numeric_hessian(f: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``theta``, symmetrized.

    The step for coordinate ``i`` is ``h * max(1, |theta_i|)``.
    """
    theta = np.asarray(theta, dtype=float)
    p = len(theta)
    steps = h * np.maximum(1.0, np.abs(theta))

    def ev(delta):
        v = f(theta + delta)
        if not np.isfinite(v):
            raise NumericalError(f"non-finite function value at theta + {delta.tolist()}")
        return float(v)

    f0 = ev(np.zeros(p))
    H = np.empty((p, p))
    E = np.diag(steps)
    for i in range(p):
        H[i, i] = (ev(E[i]) - 2.0 * f0 + ev(-E[i])) / steps[i] ** 2
        for j in range(i):
            H[i, j] = (ev(E[i] + E[j]) - ev(E[i] - E[j]) - ev(-E[i] + E[j])
                       + ev(-E[i] - E[j])) / (4.0 * steps[i] * steps[j])
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)
