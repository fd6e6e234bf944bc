"""Rubin's rules for a scalar estimand."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DataError


@dataclass(frozen=True)
class PooledEstimate:
    point: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    ci_low: float
    ci_high: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.total_var)

    @property
    def fmi(self) -> float:
        """Fraction of missing information (large-sample form)."""
        if self.total_var == 0:
            return 0.0
        return (1.0 + 1.0 / self.m) * self.between_var / self.total_var


def barnard_rubin_df(m: int, within: float, between: float, df_complete: float = math.inf) -> float:
    total = within + (1.0 + 1.0 / m) * between
    lam = (1.0 + 1.0 / m) * between / total if total > 0 else 0.0
    # lam**2 can underflow when the between variance is negligible
    nu_old = (m - 1) / lam**2 if lam**2 > 0 else math.inf
    if math.isinf(df_complete):
        return nu_old
    nu_obs = (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - lam)
    if math.isinf(nu_old):
        return nu_obs
    return 1.0 / (1.0 / nu_old + 1.0 / nu_obs)


def pool(points, variances, df_complete: float = math.inf, level: float = 0.95) -> PooledEstimate:
    """Combine ``m`` point estimates and their variances.

    ``df_complete`` is the complete-data residual degrees of freedom used in
    the Barnard-Rubin small-sample correction.
    """
    q = np.asarray(points, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = len(q)
    if m < 2:
        raise DataError("Rubin's rules need at least 2 imputations")
    if len(u) != m:
        raise DataError("points and variances differ in length")
    if np.any(u <= 0) or not np.all(np.isfinite(u)) or not np.all(np.isfinite(q)):
        raise DataError("variances must be positive and all inputs finite")
    qbar = math.fsum(q) / m
    ubar = math.fsum(u) / m
    b = math.fsum((q - qbar) ** 2) / (m - 1)
    t = ubar + (1.0 + 1.0 / m) * b
    df = barnard_rubin_df(m, ubar, b, df_complete)
    crit = stats.norm.ppf(0.5 + level / 2) if math.isinf(df) else stats.t.ppf(0.5 + level / 2, df)
    half = crit * math.sqrt(t)
    return PooledEstimate(point=qbar, within_var=ubar, between_var=b, total_var=t, df=df,
                          ci_low=qbar - half, ci_high=qbar + half, m=m)
