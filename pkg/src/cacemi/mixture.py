"""Latent compliance-class mixture model and its maximum-likelihood fit.

The outcome model is ``g(eta) = b0 + bc*C + bcz*C*Z (+ x'b_extra)`` with
``C ~ Bern(pi)`` independent of ``Z``. ``C`` is observed in the active arm
(it equals treatment received) and latent in the control arm. The CACE on
the link scale is ``bcz``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from . import _kernels
from .data import Dataset, TrialRecord, ensure_compliance
from .errors import DataError, NumericalError, SEFailureError
from .glm import LOG_2PI, FitResult, fit_linear, fit_logistic, numeric_hessian

log = logging.getLogger(__name__)

IDENTITY = "identity"
LOGIT = "logit"
SIGMA_FLOOR = 1e-6
PI_CLIP = 1e-10


@dataclass(frozen=True)
class MixtureModelSpec:
    link: str = IDENTITY
    extra_covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.link not in (IDENTITY, LOGIT):
            raise ValueError(f"unknown link {self.link!r}")
        object.__setattr__(self, "extra_covariates", tuple(self.extra_covariates))

    @classmethod
    def for_dataset(cls, ds: Dataset, extra_covariates: Sequence[str] = ()) -> "MixtureModelSpec":
        return cls(LOGIT if ds.binary else IDENTITY, tuple(extra_covariates))

    @property
    def binary(self) -> bool:
        return self.link == LOGIT

    @property
    def names(self) -> tuple[str, ...]:
        return ("beta0", "beta_c", "beta_cz", *(f"beta_{nm}" for nm in self.extra_covariates))

    def check(self, ds: Dataset) -> None:
        if self.binary != ds.binary:
            raise DataError(f"{self.link} link does not match a {ds.outcome_kind} outcome")


@dataclass(frozen=True)
class MixtureParams:
    beta0: float
    beta_c: float
    beta_cz: float
    extra_betas: tuple[float, ...] = ()
    pi: float = 0.5
    sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "extra_betas", tuple(float(b) for b in self.extra_betas))
        if not 0.0 < self.pi < 1.0:
            raise ValueError(f"pi must lie in (0, 1), got {self.pi}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta_c, self.beta_cz, *self.extra_betas])

    @classmethod
    def from_beta(cls, beta, pi, sigma=None) -> "MixtureParams":
        beta = np.asarray(beta, dtype=float)
        return cls(float(beta[0]), float(beta[1]), float(beta[2]), tuple(beta[3:]), float(pi),
                   None if sigma is None else float(sigma))

    def unconstrained(self, spec: MixtureModelSpec) -> np.ndarray:
        """``[beta..., log sigma (identity link only), logit pi]``."""
        tail = [] if spec.binary else [math.log(self.sigma)]
        return np.concatenate([self.beta, tail, [logit(self.pi)]])

    @classmethod
    def from_unconstrained(cls, vec, spec: MixtureModelSpec) -> "MixtureParams":
        vec = np.asarray(vec, dtype=float)
        p = 3 + len(spec.extra_covariates)
        sigma = None if spec.binary else max(math.exp(vec[p]), SIGMA_FLOOR)
        pi = float(np.clip(expit(vec[-1]), PI_CLIP, 1 - PI_CLIP))
        return cls.from_beta(vec[:p], pi, sigma)


def unconstrained_names(spec: MixtureModelSpec) -> tuple[str, ...]:
    tail = () if spec.binary else ("log_sigma",)
    return (*spec.names, *tail, "logit_pi")


def design(c, z, xe) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return np.column_stack([np.ones(len(c)), c, c * np.asarray(z, dtype=float), xe])


def extra_matrix(ds: Dataset, spec: MixtureModelSpec) -> np.ndarray:
    if not spec.extra_covariates:
        return np.empty((ds.n, 0))
    return ds.covariates(spec.extra_covariates)


def linear_predictors(z, xe, theta: MixtureParams):
    """Per-record linear predictors under C=1 and C=0."""
    base = theta.beta0 + (xe @ np.asarray(theta.extra_betas) if xe.shape[1] else 0.0)
    base = np.broadcast_to(np.asarray(base, dtype=float), (len(z),))
    return base + theta.beta_c + theta.beta_cz * np.asarray(z, dtype=float), base


def _sigma(theta: MixtureParams, spec: MixtureModelSpec) -> float:
    if spec.binary:
        return 1.0
    if theta.sigma is None:
        raise ValueError("identity-link parameters need sigma")
    return max(theta.sigma, SIGMA_FLOOR)


def log_density(y, eta, theta: MixtureParams, spec: MixtureModelSpec):
    y = np.asarray(y, dtype=float)
    if spec.binary:
        return np.where(y > 0.5, -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta))
    s = _sigma(theta, spec)
    r = (y - eta) / s
    return -0.5 * (LOG_2PI + r * r) - math.log(s)


def outcome_density(y, c, z, x, theta: MixtureParams, spec: MixtureModelSpec):
    """Density (continuous) or mass (binary) of ``y`` given class, arm and covariates.

    ``x`` holds the extra-covariate values in ``spec.extra_covariates`` order
    (a scalar row, or one row per element of ``y``).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)) if len(spec.extra_covariates) else np.empty(0)
    eta = theta.beta0 + theta.beta_c * np.asarray(c, dtype=float) \
        + theta.beta_cz * np.asarray(c, dtype=float) * np.asarray(z, dtype=float)
    if len(spec.extra_covariates):
        eta = eta + np.asarray(x).reshape(-1, len(spec.extra_covariates)) @ np.asarray(theta.extra_betas)
        if np.ndim(y) == 0:
            eta = eta[0]
    out = np.exp(log_density(y, eta, theta, spec))
    return float(out) if np.ndim(out) == 0 else out


def class_posterior(record: TrialRecord, theta: MixtureParams, spec: MixtureModelSpec) -> float:
    """P(C=1 | observed data) for one record.

    Active-arm records return their observed class; a missing outcome
    returns the prior ``pi``.
    """
    if record.z == 1:
        return float(record.d)
    if record.c is not None:
        return float(record.c)
    if record.y is None:
        return theta.pi
    xe = np.array([[record.x[nm] for nm in spec.extra_covariates]]).reshape(1, -1)
    e1, e0 = linear_predictors(np.array([record.z]), xe, theta)
    return float(_kernels.class_posterior(np.array([record.y]), e1, e0, theta.pi,
                                          _sigma(theta, spec), spec.binary)[0])


def class_posterior_probs(ds: Dataset, theta: MixtureParams, spec: MixtureModelSpec,
                          y=None) -> np.ndarray:
    """Vectorised :func:`class_posterior` over all records.

    ``y`` overrides the dataset outcome (e.g. with current imputed values).
    """
    y = ds.y if y is None else y
    xe = extra_matrix(ds, spec)
    out = np.where(np.isnan(ds.c), theta.pi, ds.c)
    idx = np.nonzero(np.isnan(ds.c) & ~np.isnan(y))[0]
    if len(idx):
        e1, e0 = linear_predictors(ds.z[idx], xe[idx], theta)
        out[idx] = _kernels.class_posterior(y[idx], e1, e0, theta.pi, _sigma(theta, spec), spec.binary)
    return out


def observed_loglik(ds: Dataset, theta: MixtureParams, spec: MixtureModelSpec) -> float:
    """Log-likelihood of the observed data with latent classes summed out."""
    if ds.n == 0:
        return 0.0
    ds = ensure_compliance(ds)
    xe = extra_matrix(ds, spec)
    e1, e0 = linear_predictors(ds.z, xe, theta)
    lp1 = math.log(theta.pi)
    lp0 = math.log1p(-theta.pi)
    has_y = ~np.isnan(ds.y)
    known = ~np.isnan(ds.c)
    yv = np.where(has_y, ds.y, 0.0)
    l1 = lp1 + log_density(yv, e1, theta, spec)
    l0 = lp0 + log_density(yv, e0, theta, spec)
    total = 0.0
    m = known & has_y
    total += float(np.sum(np.where(ds.c[m] == 1, l1[m], l0[m])))
    m = known & ~has_y
    total += float(np.sum(np.where(ds.c[m] == 1, lp1, lp0)))
    m = ~known & has_y
    total += float(np.sum(np.logaddexp(l1[m], l0[m])))
    return total


def _m_step(X, y, w, spec, start):
    if spec.binary:
        fit = fit_logistic(X, y, w, start=start)
        return fit.coef, None, fit
    fit = fit_linear(X, y, w)
    return fit.coef, max(fit.sigma_ml, SIGMA_FLOOR), fit


def _initial(ds: Dataset, spec: MixtureModelSpec) -> MixtureParams:
    known = ~np.isnan(ds.c)
    if not known.any():
        raise DataError("no observed compliance classes; run derive_compliance first")
    pi = float(np.clip(np.mean(ds.c[known]), 0.01, 0.99))
    has_y = ~np.isnan(ds.y)
    c0 = np.where(known, ds.c, 1.0)[has_y]
    X = design(c0, ds.z[has_y], extra_matrix(ds, spec)[has_y])
    beta, sigma, _ = _m_step(X, ds.y[has_y], None, spec, None)
    return MixtureParams.from_beta(beta, pi, sigma)


@dataclass
class EMTrace:
    loglik: list[float] = field(default_factory=list)


def em_fit(ds: Dataset, spec: MixtureModelSpec, max_iter: int = 500, tol: float = 1e-8,
           compute_se: bool = True, init: MixtureParams | None = None):
    """Fit the mixture model by EM.

    Latent-class records with an observed outcome enter the M-step twice
    (as C=1 with weight equal to the posterior, and as C=0 with the
    complement). Records with a missing outcome inform ``pi`` only.

    Returns ``(params, fit)`` where ``fit.coef`` and ``fit.vcov`` are on the
    unconstrained scale ``[beta..., log sigma, logit pi]`` and the vcov comes
    from a numerical Hessian of the observed-data log-likelihood. Raises
    :class:`SEFailureError` (carrying ``(params, fit)``) if that Hessian is
    not negative definite.
    """
    spec.check(ds)
    ds = ensure_compliance(ds)
    xe_all = extra_matrix(ds, spec)
    if np.isnan(xe_all).any():
        raise DataError("extra covariates in the mixture model may not be missing")
    known = ~np.isnan(ds.c)
    has_y = ~np.isnan(ds.y)
    ko = known & has_y
    lo = ~known & has_y
    lm = ~known & ~has_y
    n = ds.n
    theta = init if init is not None else _initial(ds, spec)
    Xk = design(ds.c[ko], ds.z[ko], xe_all[ko])
    X1 = design(np.ones(lo.sum()), ds.z[lo], xe_all[lo])
    X0 = design(np.zeros(lo.sum()), ds.z[lo], xe_all[lo])
    Xs = np.vstack([Xk, X1, X0])
    ys = np.concatenate([ds.y[ko], ds.y[lo], ds.y[lo]])
    known_c_sum = float(np.sum(ds.c[known]))
    trace = EMTrace([observed_loglik(ds, theta, spec)])
    converged = False
    it = 0
    warns: list[str] = []
    for it in range(1, max_iter + 1):
        post = class_posterior_probs(ds, theta, spec)
        wl = post[lo]
        ws = np.concatenate([np.ones(ko.sum()), wl, 1.0 - wl])
        beta, sigma, mfit = _m_step(Xs, ys, ws, spec, theta.beta if spec.binary else None)
        warns.extend(mfit.warnings)
        pi = (known_c_sum + wl.sum() + theta.pi * lm.sum()) / n
        pi = float(np.clip(pi, PI_CLIP, 1 - PI_CLIP))
        theta = MixtureParams.from_beta(beta, pi, sigma)
        trace.loglik.append(observed_loglik(ds, theta, spec))
        if abs(trace.loglik[-1] - trace.loglik[-2]) < tol:
            converged = True
            break
    if not converged:
        warns.append(f"EM did not converge in {max_iter} iterations")
    names = unconstrained_names(spec)
    vec = theta.unconstrained(spec)
    fit = FitResult(coef=vec, vcov=np.full((len(vec), len(vec)), np.nan), loglik=trace.loglik[-1],
                    converged=converged, iterations=it, names=names,
                    sigma=theta.sigma, warnings=sorted(set(warns)))
    fit.trace = trace.loglik
    if not compute_se:
        return theta, fit

    def f(v):
        return observed_loglik(ds, MixtureParams.from_unconstrained(v, spec), spec)

    H = numeric_hessian(f, vec)
    try:
        L = linalg.cholesky(-H, lower=True)
    except linalg.LinAlgError:
        fit.warnings.append("observed-data Hessian is not negative definite")
        raise SEFailureError("mixture Hessian not negative definite; SEs unavailable",
                             estimate=(theta, fit)) from None
    fit.vcov = linalg.cho_solve((L, True), np.eye(len(vec)))
    fit.info = -H
    return theta, fit


def complete_data_fit(c, y, z, xe, spec: MixtureModelSpec, start=None):
    """ML fit of the mixture model when every class and outcome is known.

    Returns ``(params, vcov, fit)`` with ``vcov`` the inverse information on
    the unconstrained scale (block diagonal: regression, log sigma, logit pi).
    """
    X = design(c, z, xe)
    n = len(c)
    pi = float(np.clip(np.mean(c), PI_CLIP, 1 - PI_CLIP))
    p = X.shape[1]
    if spec.binary:
        fit = fit_logistic(X, y, start=start)
        sigma = None
        beta_v = fit.vcov
        size = p + 1
    else:
        fit = fit_linear(X, y)
        sigma = max(fit.sigma_ml, SIGMA_FLOOR)
        beta_v = sigma**2 * linalg.inv(fit.info)
        size = p + 2
    vcov = np.zeros((size, size))
    vcov[:p, :p] = beta_v
    if not spec.binary:
        vcov[p, p] = 1.0 / (2.0 * n)
    vcov[-1, -1] = 1.0 / (n * pi * (1.0 - pi))
    return MixtureParams.from_beta(fit.coef, pi, sigma), vcov, fit


def fit_analysis_model(ds: Dataset, spec: MixtureModelSpec):
    """Regression of the outcome on class and class-by-arm for a completed dataset.

    Returns ``(point, variance, df_complete)`` for ``beta_cz``.
    """
    if ds.latent.any() or ds.missing_y.any():
        raise DataError("analysis model needs complete classes and outcomes")
    xe = extra_matrix(ds, spec)
    X = design(ds.c, ds.z, xe)
    fit = fit_logistic(X, ds.y) if spec.binary else fit_linear(X, ds.y)
    if not np.all(np.isfinite(fit.vcov)):
        raise NumericalError("analysis model variance unavailable")
    return float(fit.coef[2]), float(fit.vcov[2, 2]), float(ds.n - X.shape[1])
