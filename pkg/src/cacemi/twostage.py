"""Standard instrumental-variable estimators of the CACE.

All estimators need a complete outcome. With missing outcomes, impute
first with :func:`cacemi.smcmic.fcs_impute_outcome_for_ts` and pool the
per-imputation estimates (see :func:`cacemi.smcmic.estimate_after_fcs`).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import logit

from .data import Dataset
from .errors import BoundaryError, DataError, NumericalError, WeakInstrumentError
from .estimates import DIFFERENCE, LOG_OR, CaceEstimate
from .glm import fit_linear, fit_logistic

WEAK_TOL = 1e-8


def _require_complete(ds: Dataset, method: str) -> None:
    if ds.missing_y.any():
        raise DataError(
            f"{method}: outcome has {int(ds.missing_y.sum())} missing values; "
            "multiply impute first (fcs_impute_outcome_for_ts) and pool"
        )


def _require_binary(ds: Dataset, method: str) -> None:
    if not ds.binary:
        raise DataError(f"{method} requires binary outcome")


def _arm_moments(ds: Dataset):
    out = {}
    for arm in (0, 1):
        m = ds.z == arm
        y = ds.y[m]
        d = ds.d[m].astype(float)
        n = int(m.sum())
        if n < 2:
            raise DataError("each arm needs at least two records")
        cov = np.cov(np.vstack([y, d]), ddof=1)
        out[arm] = (n, y.mean(), d.mean(), cov[0, 0], cov[1, 1], cov[0, 1])
    return out


def wald_estimate(ds: Dataset) -> CaceEstimate:
    """Ratio of the ITT effects on outcome and on treatment received.

    The standard error is the delta-method approximation over the four arm
    means, with arms independent.
    """
    _require_complete(ds, "wald")
    mo = _arm_moments(ds)
    n1, y1, d1, vy1, vd1, c1 = mo[1]
    n0, y0, d0, vy0, vd0, c0 = mo[0]
    num = y1 - y0
    den = d1 - d0
    if abs(den) < 1e-12:
        raise WeakInstrumentError("instrument has no effect on treatment received in this sample")
    point = num / den
    var_num = vy1 / n1 + vy0 / n0
    var_den = vd1 / n1 + vd0 / n0
    cov = c1 / n1 + c0 / n0
    var = (var_num - 2.0 * point * cov + point**2 * var_den) / den**2
    return CaceEstimate.normal("wald", DIFFERENCE, point, math.sqrt(max(var, 0.0)))


def wald_or(ds: Dataset) -> CaceEstimate:
    """Logistic Wald-type estimator on the log-odds-ratio scale."""
    _require_binary(ds, "waldor")
    _require_complete(ds, "waldor")
    mo = _arm_moments(ds)
    n1, p1, d1, _, vd1, c1 = mo[1]
    n0, p0, d0, _, vd0, c0 = mo[0]
    for p in (p1, p0):
        if p <= 0.0 or p >= 1.0:
            raise BoundaryError("an arm-level outcome proportion is 0 or 1; logit undefined")
    den = d1 - d0
    if abs(den) < 1e-12:
        raise WeakInstrumentError("instrument has no effect on treatment received in this sample")
    num = logit(p1) - logit(p0)
    point = num / den
    g1 = 1.0 / (p1 * (1.0 - p1))
    g0 = 1.0 / (p0 * (1.0 - p0))
    var_num = g1 * p1 * (1.0 - p1) / n1 + g0 * p0 * (1.0 - p0) / n0
    var_den = vd1 / n1 + vd0 / n0
    cov = g1 * c1 / n1 + g0 * c0 / n0
    var = (var_num - 2.0 * point * cov + point**2 * var_den) / den**2
    return CaceEstimate.normal("waldor", LOG_OR, point, math.sqrt(max(var, 0.0)))


def _covariate_block(ds: Dataset, covariates: Sequence[str]) -> np.ndarray:
    xc = ds.covariates(covariates) if covariates else np.empty((ds.n, 0))
    if np.isnan(xc).any():
        raise DataError("covariates used in two-stage estimation may not be missing")
    return xc


def tsls(ds: Dataset, covariates: Sequence[str] = (), robust: bool = False) -> CaceEstimate:
    """Two-stage least squares.

    Second-stage residuals use the actual treatment received, not its
    first-stage prediction. ``robust=True`` switches to an HC1 sandwich.
    """
    _require_complete(ds, "tsls")
    xc = _covariate_block(ds, covariates)
    one = np.ones(ds.n)
    z = ds.z.astype(float)
    d = ds.d.astype(float)
    s1 = fit_linear(np.column_stack([one, z, xc]), d)
    if abs(s1.coef[1]) < WEAK_TOL:
        raise WeakInstrumentError(f"first-stage coefficient {s1.coef[1]:.3g} is below {WEAK_TOL}")
    dhat = s1.coef[0] + s1.coef[1] * z + (xc @ s1.coef[2:] if xc.shape[1] else 0.0)
    X2 = np.column_stack([one, dhat, xc])
    s2 = fit_linear(X2, ds.y)
    beta = s2.coef
    resid = ds.y - np.column_stack([one, d, xc]) @ beta
    n, k = X2.shape
    bread = linalg.inv(X2.T @ X2)
    if robust:
        meat = (X2 * (resid**2)[:, None]).T @ X2
        vcov = bread @ meat @ bread * (n / (n - k))
    else:
        vcov = float(resid @ resid) / (n - k) * bread
    est = CaceEstimate.normal("tsls", DIFFERENCE, float(beta[1]), math.sqrt(vcov[1, 1]), df=n - k)
    est.extra["first_stage"] = float(s1.coef[1])
    return est


def _tsri_point(z, d, y, xc, warns=None) -> float:
    one = np.ones(len(z))
    s1 = fit_linear(np.column_stack([one, z, xc]), d)
    if abs(s1.coef[1]) < WEAK_TOL:
        raise WeakInstrumentError("first-stage coefficient is ~0")
    v = d - np.column_stack([one, z, xc]) @ s1.coef
    s2 = fit_logistic(np.column_stack([one, d, v, xc]), y)
    if warns is not None:
        warns.extend(s2.warnings)
    return float(s2.coef[1])


def tsri(ds: Dataset, covariates: Sequence[str] = (), n_boot: int = 500, seed: int = 0,
         level: float = 0.95) -> CaceEstimate:
    """Two-stage residual inclusion for a binary outcome.

    Stage 1 regresses treatment received on randomization (linear); stage 2
    is a logistic regression of the outcome on treatment received and the
    first-stage residual. SE and percentile CI come from a nonparametric
    bootstrap of both stages together.
    """
    _require_binary(ds, "tsri")
    _require_complete(ds, "tsri")
    xc = _covariate_block(ds, covariates)
    z = ds.z.astype(float)
    d = ds.d.astype(float)
    y = ds.y
    warns: list[str] = []
    point = _tsri_point(z, d, y, xc, warns)
    rng = np.random.default_rng(seed)
    boots = []
    failed = 0
    n = ds.n
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        try:
            b = _tsri_point(z[idx], d[idx], y[idx], xc[idx])
        except (NumericalError, DataError):
            failed += 1
            continue
        if not np.isfinite(b):
            failed += 1
            continue
        boots.append(b)
    if failed > 0.10 * n_boot:
        raise NumericalError(f"tsri: {failed} of {n_boot} bootstrap resamples failed")
    if failed:
        warns.append(f"{failed} bootstrap resamples failed and were skipped")
    boots = np.asarray(boots)
    alpha = 1.0 - level
    lo, hi = np.quantile(boots, [alpha / 2, 1 - alpha / 2])
    se = float(np.std(boots, ddof=1))
    return CaceEstimate("tsri", LOG_OR, point, se, float(lo), float(hi),
                        warnings=sorted(set(warns)), extra={"n_boot": len(boots)})
