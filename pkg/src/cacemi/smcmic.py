"""Substantive-model-compatible multiple imputation of compliance classes.

Each imputation stream alternates, for a fixed number of cycles, between
(1) fitting the mixture model to the current completed data and drawing
parameters from the asymptotic normal approximation to their sampling
distribution, (2) re-imputing every latent class from its conditional
distribution given the outcome, and (3) re-imputing missing outcomes from
the outcome model. Latent classes are drawn by rejection sampling: propose
``C*`` from ``Bern(pi)`` and accept with probability
``f(y | C*) / max(f(y | 1), f(y | 0))``.

The module also holds the plain per-arm outcome imputer used before
two-stage estimators.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .data import Dataset, TrialRecord, ensure_compliance, write_csv
from .errors import DataError, NumericalError, SEFailureError
from .estimates import DIFFERENCE, LOG_OR, CaceEstimate
from .glm import fit_linear, fit_logistic
from .mixture import (
    MixtureModelSpec,
    MixtureParams,
    complete_data_fit,
    design,
    em_fit,
    extra_matrix,
    fit_analysis_model,
    PI_CLIP,
    SIGMA_FLOOR,
    linear_predictors,
)
from .pooling import pool

log = logging.getLogger(__name__)

ROUND_ATTEMPTS = 4


@dataclass(frozen=True)
class ImputationConfig:
    m: int = 10
    iterations: int = 250
    rejection_cap: int = 5000
    aux_covariates: tuple[str, ...] = ()
    seed: int = 0
    sampler: str = "rejection"
    param_draw: str = "normal"
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "aux_covariates", tuple(self.aux_covariates))
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.rejection_cap < 1:
            raise ValueError("rejection_cap must be at least 1")
        if self.sampler not in ("rejection", "direct"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.param_draw not in ("normal", "bootstrap"):
            raise ValueError(f"unknown param_draw {self.param_draw!r}")


@dataclass
class ImputedSet:
    datasets: list[Dataset]
    param_draws: list
    warnings: list[str] = field(default_factory=list)
    rejection_fallbacks: int = 0
    improper_draws: int = 0
    traces: list[np.ndarray] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.datasets)


def stream_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


# --- parameter draws --------------------------------------------------------

def mvn_draw(mean, cov, rng) -> np.ndarray:
    """One multivariate normal draw; a zero covariance returns ``mean`` exactly."""
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal(len(mean))
    w, v = np.linalg.eigh(cov)
    return mean + v @ (np.sqrt(np.clip(w, 0.0, None)) * z)


def draw_from(theta: MixtureParams, vcov, spec: MixtureModelSpec, rng) -> MixtureParams:
    vec = theta.unconstrained(spec)
    return MixtureParams.from_unconstrained(mvn_draw(vec, vcov, rng), spec)


def draw_params(ds: Dataset, spec: MixtureModelSpec, rng):
    """Draw mixture parameters around the MLE for ``ds``.

    Uses the closed-form complete-data information when ``ds`` has no latent
    classes or missing outcomes, and the EM fit otherwise. Returns
    ``(params, proper)``; ``proper`` is False when standard errors were
    unavailable and the MLE itself is returned.
    """
    xe = extra_matrix(ds, spec)
    if not ds.latent.any() and not ds.missing_y.any():
        theta, vcov, _ = complete_data_fit(ds.c, ds.y, ds.z, xe, spec)
    else:
        try:
            theta, fit = em_fit(ds, spec)
        except SEFailureError as exc:
            theta, _ = exc.estimate
            log.warning("parameter draw fell back to the MLE: %s", exc)
            return theta, False
        vcov = fit.vcov
    return draw_from(theta, vcov, spec, rng), True


# --- class and outcome samplers ---------------------------------------------

def sample_classes_direct(y, eta1, eta0, pi, sigma, binary, rng) -> np.ndarray:
    p = _kernels.class_posterior(y, eta1, eta0, pi, sigma, binary)
    return (rng.random(len(p)) < p).astype(float)


def sample_classes_rejection(y, eta1, eta0, pi, sigma, binary, rng, cap: int):
    """Rejection sampler for latent classes.

    Returns ``(classes, n_fallback)``; records with no acceptance after
    ``cap`` proposals are drawn from the closed-form posterior instead.
    """
    n = len(y)
    y = np.ascontiguousarray(y, dtype=float)
    eta1 = np.ascontiguousarray(eta1, dtype=float)
    eta0 = np.ascontiguousarray(eta0, dtype=float)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (n,))
    out = np.empty(n)
    pending = np.arange(n)
    used = 0
    while len(pending) and used < cap:
        k = min(ROUND_ATTEMPTS, cap - used)
        u = rng.random((len(pending), k, 2))
        cls, _ = _kernels.rejection_round(y[pending], eta1[pending], eta0[pending], pi[pending],
                                          sigma, binary, u)
        ok = cls >= 0
        out[pending[ok]] = cls[ok]
        pending = pending[~ok]
        used += k
    if len(pending):
        out[pending] = sample_classes_direct(y[pending], eta1[pending], eta0[pending], pi[pending],
                                             sigma, binary, rng)
    return out, len(pending)


def _record_eta(record: TrialRecord, theta: MixtureParams, spec: MixtureModelSpec):
    xe = np.array([[record.x[nm] for nm in spec.extra_covariates]]).reshape(1, -1)
    e1, e0 = linear_predictors(np.array([record.z]), xe, theta)
    return e1, e0


def _sigma(theta, spec):
    return 1.0 if spec.binary else theta.sigma


def impute_class_direct(record: TrialRecord, theta: MixtureParams, spec: MixtureModelSpec, rng) -> int:
    """Draw a latent class from its closed-form posterior."""
    if record.y is None:
        raise DataError("impute_class_direct needs a (possibly imputed) outcome")
    e1, e0 = _record_eta(record, theta, spec)
    return int(sample_classes_direct(np.array([record.y]), e1, e0, theta.pi, _sigma(theta, spec),
                                     spec.binary, rng)[0])


def impute_class_rejection(record: TrialRecord, theta: MixtureParams, spec: MixtureModelSpec, rng,
                           cap: int = 5000) -> tuple[int, bool]:
    """Draw a latent class by rejection sampling.

    Returns ``(class, fell_back)``.
    """
    if record.y is None:
        raise DataError("impute_class_rejection needs a (possibly imputed) outcome")
    e1, e0 = _record_eta(record, theta, spec)
    cls, nf = sample_classes_rejection(np.array([record.y]), e1, e0, theta.pi, _sigma(theta, spec),
                                       spec.binary, rng, cap)
    if nf:
        log.warning("rejection sampler hit the cap of %d proposals; used the closed form", cap)
    return int(cls[0]), bool(nf)


def sample_outcomes(eta, sigma, binary, rng) -> np.ndarray:
    if binary:
        return (rng.random(len(eta)) < expit(eta)).astype(float)
    return eta + sigma * rng.standard_normal(len(eta))


def impute_outcome(record: TrialRecord, theta: MixtureParams, spec: MixtureModelSpec, rng) -> float:
    """Draw an outcome from the mixture outcome model given the record's class."""
    if record.c is None:
        raise DataError("impute_outcome needs the record's class")
    xe = np.array([[record.x[nm] for nm in spec.extra_covariates]]).reshape(1, -1)
    eta = design([record.c], [record.z], xe) @ theta.beta
    return float(sample_outcomes(eta, _sigma(theta, spec), spec.binary, rng)[0])


# --- the imputation stream --------------------------------------------------

def _impute_missing_aux(xe, ds: Dataset, rng):
    """Single stochastic-regression pass for missing auxiliary covariates."""
    xe = xe.copy()
    base = np.column_stack([np.ones(ds.n), ds.z, ds.d])
    for j in range(xe.shape[1]):
        miss = np.isnan(xe[:, j])
        if not miss.any():
            continue
        others = [k for k in range(xe.shape[1]) if k != j and not np.isnan(xe[:, k]).any()]
        X = np.column_stack([base, xe[:, others]])
        fit = fit_linear(X[~miss], xe[~miss, j])
        xe[miss, j] = X[miss] @ fit.coef + fit.sigma * rng.standard_normal(miss.sum())
    return xe


def _initialise(ds: Dataset, rng):
    c = ds.c.copy()
    y = ds.y.copy()
    latent = np.isnan(c)
    miss = np.isnan(y)
    obs_c = ds.c[ds.z == 1]
    obs_c = obs_c[~np.isnan(obs_c)]
    if latent.any():
        if len(obs_c) == 0:
            raise DataError("no observed compliance classes to initialise from")
        c[latent] = rng.choice(obs_c, size=int(latent.sum()))
    if miss.any():
        y_obs = ds.y[~miss]
        if len(y_obs) == 0:
            raise DataError("no observed outcomes")
        y[miss] = rng.choice(y_obs, size=int(miss.sum()))
    return c, y


class _CycleDraw:
    """Lean complete-data fit and parameter draw for one cycle.

    Draws from the same normal approximation as :func:`draw_from` applied to
    :func:`cacemi.mixture.complete_data_fit` (block diagonal on
    ``[beta, log sigma, logit pi]``) without building intermediate objects.
    """

    def __init__(self, z, xe, binary: bool):
        n = len(z)
        self.binary = binary
        self.n = n
        self.z = z
        self.X = np.column_stack([np.ones(n), np.zeros(n), np.zeros(n), xe])
        self.start = np.zeros(self.X.shape[1])
        self.w = np.ones(n)

    def __call__(self, c, y, rng):
        X = self.X
        X[:, 1] = c
        X[:, 2] = c * self.z
        n = self.n
        p = X.shape[1]
        if self.binary:
            beta_hat, info, _, _, _, _, ok = _kernels.irls_logistic(X, y, self.w, self.start, 100, 1e-8, 1e-10)
            if not ok or not np.all(np.isfinite(beta_hat)):
                raise NumericalError("logistic fit failed during imputation")
            self.start = beta_hat
            scale = 1.0
            sigma = 1.0
        else:
            info = X.T @ X
            beta_hat = np.linalg.solve(info, X.T @ y)
            r = y - X @ beta_hat
            s_ml = max(math.sqrt(float(r @ r) / n), SIGMA_FLOOR)
            scale = s_ml
            sigma = max(s_ml * math.exp(rng.standard_normal() / math.sqrt(2.0 * n)), SIGMA_FLOOR)
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise NumericalError("singular design during imputation") from None
        beta = beta_hat + scale * np.linalg.solve(L.T, rng.standard_normal(p))
        pi_hat = min(max(float(c.mean()), PI_CLIP), 1 - PI_CLIP)
        lp = math.log(pi_hat / (1.0 - pi_hat)) + rng.standard_normal() / math.sqrt(n * pi_hat * (1.0 - pi_hat))
        pi = min(max(1.0 / (1.0 + math.exp(-lp)), PI_CLIP), 1 - PI_CLIP)
        return beta, sigma, pi


def _bootstrap_draw(c, y, z, xe, spec, rng, start):
    idx = rng.integers(0, len(c), len(c))
    theta, _, fit = complete_data_fit(c[idx], y[idx], z[idx], xe[idx], spec, start=start)
    return theta.beta, _sigma(theta, spec), theta.pi, fit.coef


def _run_stream(ds: Dataset, spec: MixtureModelSpec, cfg: ImputationConfig, index: int):
    rng = np.random.default_rng(stream_seed(cfg.seed, index))
    xe = extra_matrix(ds, spec)
    if np.isnan(xe).any():
        xe = _impute_missing_aux(xe, ds, rng)
    z = ds.z.astype(float)
    latent = np.nonzero(np.isnan(ds.c))[0]
    miss = np.nonzero(np.isnan(ds.y))[0]
    z_lat, xe_lat = z[latent], xe[latent]
    X_miss_z, xe_miss = z[miss], xe[miss]
    fallbacks = 0
    trace = np.empty(cfg.iterations)
    for attempt in range(2):
        c, y = _initialise(ds, rng)
        draw = _CycleDraw(z, xe, spec.binary)
        start = None
        try:
            for it in range(cfg.iterations):
                if cfg.param_draw == "bootstrap":
                    beta, sigma, pi, start = _bootstrap_draw(c, y, z, xe, spec, rng, start)
                else:
                    beta, sigma, pi = draw(c, y, rng)
                if len(latent):
                    e0 = beta[0] + xe_lat @ beta[3:]
                    e1 = e0 + beta[1] + beta[2] * z_lat
                    if cfg.sampler == "rejection":
                        c[latent], nf = sample_classes_rejection(y[latent], e1, e0, pi, sigma,
                                                                 spec.binary, rng, cfg.rejection_cap)
                        fallbacks += nf
                    else:
                        c[latent] = sample_classes_direct(y[latent], e1, e0, pi, sigma, spec.binary, rng)
                    trace[it] = c[latent].mean()
                else:
                    trace[it] = math.nan
                if len(miss):
                    cm = c[miss]
                    eta = beta[0] + beta[1] * cm + beta[2] * cm * X_miss_z + xe_miss @ beta[3:]
                    y[miss] = sample_outcomes(eta, sigma, spec.binary, rng)
            break
        except NumericalError as exc:
            if attempt == 1:
                raise NumericalError(f"imputation stream {index} failed twice: {exc}") from exc
            log.warning("imputation stream %d failed (%s); reinitialising", index, exc)
    theta = MixtureParams.from_beta(beta, pi, None if spec.binary else sigma)
    out = ds.replace(c=c, y=y)
    return out, theta, fallbacks, trace


def _run_streams(args):
    ds, spec, cfg, indices = args
    return [_run_stream(ds, spec, cfg, i) for i in indices]


def smc_mic_run(ds: Dataset, cfg: ImputationConfig, spec: MixtureModelSpec | None = None) -> ImputedSet:
    """Create ``cfg.m`` completed datasets.

    ``spec`` is the imputation model; it defaults to the mixture model with
    ``cfg.aux_covariates`` as extra outcome-model terms. Stream ``k`` is
    seeded from ``SeedSequence([cfg.seed, k])``.
    """
    if spec is None:
        spec = MixtureModelSpec.for_dataset(ds, cfg.aux_covariates)
    spec.check(ds)
    ds = ensure_compliance(ds)
    if cfg.n_jobs > 1:
        chunks = [list(range(cfg.m))[i::cfg.n_jobs] for i in range(cfg.n_jobs)]
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            parts = list(ex.map(_run_streams, [(ds, spec, cfg, ch) for ch in chunks]))
        by_index = {}
        for ch, part in zip(chunks, parts):
            by_index.update(zip(ch, part))
        results = [by_index[i] for i in range(cfg.m)]
    else:
        results = [_run_stream(ds, spec, cfg, i) for i in range(cfg.m)]
    fallbacks = sum(r[2] for r in results)
    warns = []
    if fallbacks:
        warns.append(f"rejection sampler fell back to the closed form {fallbacks} times")
    return ImputedSet(datasets=[r[0] for r in results], param_draws=[r[1] for r in results],
                      warnings=warns, rejection_fallbacks=fallbacks, traces=[r[3] for r in results])


def pool_analysis(imp: ImputedSet, analysis_spec: MixtureModelSpec, method: str = "smc-mic") -> CaceEstimate:
    """Fit the analysis model to each completed dataset and pool ``beta_cz``."""
    pts, vs, dfc = [], [], []
    for d in imp.datasets:
        q, v, df = fit_analysis_model(d, analysis_spec)
        pts.append(q)
        vs.append(v)
        dfc.append(df)
    pe = pool(pts, vs, df_complete=min(dfc))
    estimand = LOG_OR if analysis_spec.binary else DIFFERENCE
    return CaceEstimate(method, estimand, pe.point, pe.se, pe.ci_low, pe.ci_high, m=pe.m, df=pe.df,
                        warnings=list(imp.warnings),
                        extra={"within_var": pe.within_var, "between_var": pe.between_var})


def smc_mic_estimate(ds: Dataset, cfg: ImputationConfig) -> CaceEstimate:
    """SMC MIC estimate of the CACE, analysed with the marginal mixture model."""
    imp = smc_mic_run(ds, cfg)
    return pool_analysis(imp, MixtureModelSpec.for_dataset(ds))


def ml_mixture_estimate(ds: Dataset, spec: MixtureModelSpec | None = None) -> CaceEstimate:
    """CACE from the EM fit, with a Wald-type 95% interval."""
    spec = spec or MixtureModelSpec.for_dataset(ds)
    theta, fit = em_fit(ds, spec)
    se = math.sqrt(fit.vcov[2, 2])
    est = CaceEstimate.normal("ml-mixture", LOG_OR if spec.binary else DIFFERENCE, theta.beta_cz, se,
                              warnings=list(fit.warnings))
    est.extra["pi"] = theta.pi
    return est


# --- outcome-only imputation ahead of two-stage estimators --------------------

def fcs_impute_outcome_for_ts(ds: Dataset, cfg: ImputationConfig) -> ImputedSet:
    """Impute missing outcomes separately within each randomized arm.

    The imputation model regresses the outcome on treatment received (when
    it varies within the arm) and ``cfg.aux_covariates``. Each imputation
    draws regression parameters from their approximate posterior (normal for
    coefficients, scaled inverse chi-square for the residual variance).
    """
    miss = ds.missing_y
    if not miss.any():
        return ImputedSet(datasets=[ds] * cfg.m, param_draws=[None] * cfg.m)
    aux = ds.covariates(cfg.aux_covariates) if cfg.aux_covariates else np.empty((ds.n, 0))
    if np.isnan(aux).any():
        raise DataError("auxiliary covariates for outcome imputation may not be missing")
    fits = {}
    for arm in (0, 1):
        m = ds.z == arm
        cols = [np.ones(ds.n)]
        d = ds.d.astype(float)
        if np.ptp(d[m]) > 0:
            cols.append(d)
        X = np.column_stack([*cols, aux])
        obs = m & ~miss
        p = X.shape[1]
        if obs.sum() < p + 2:
            raise DataError(f"arm z={arm} has {int(obs.sum())} complete cases; need at least {p + 2}")
        fit = fit_logistic(X[obs], ds.y[obs]) if ds.binary else fit_linear(X[obs], ds.y[obs])
        fits[arm] = (X, fit, m & miss)
    datasets, draws = [], []
    for k in range(cfg.m):
        rng = np.random.default_rng(stream_seed(cfg.seed, k))
        y = ds.y.copy()
        dr = {}
        for arm, (X, fit, target) in fits.items():
            if not target.any():
                continue
            if ds.binary:
                beta = mvn_draw(fit.coef, fit.vcov, rng)
                y[target] = (rng.random(target.sum()) < expit(X[target] @ beta)).astype(float)
                dr[arm] = {"beta": beta}
            else:
                df = fit.df_resid
                s2 = fit.sigma**2 * df / rng.chisquare(df)
                beta = mvn_draw(fit.coef, fit.vcov * s2 / fit.sigma**2, rng)
                y[target] = X[target] @ beta + math.sqrt(s2) * rng.standard_normal(target.sum())
                dr[arm] = {"beta": beta, "sigma": math.sqrt(s2)}
        datasets.append(ds.replace(y=y))
        draws.append(dr)
    return ImputedSet(datasets=datasets, param_draws=draws)


def estimate_after_fcs(ds: Dataset, method: str, cfg: ImputationConfig, covariates: Sequence[str] = (),
                       n_boot: int = 200) -> CaceEstimate:
    """Multiply impute outcomes, run a two-stage estimator on each, and pool."""
    from . import twostage

    imp = fcs_impute_outcome_for_ts(ds, cfg)
    pts, vs, warns = [], [], []
    for k, d in enumerate(imp.datasets):
        if method == "tsls":
            est = twostage.tsls(d, covariates)
        elif method == "tsri":
            est = twostage.tsri(d, covariates, n_boot=n_boot, seed=cfg.seed + k)
        elif method == "wald":
            est = twostage.wald_estimate(d)
        elif method == "waldor":
            est = twostage.wald_or(d)
        else:
            raise DataError(f"{method} is not a two-stage estimator")
        pts.append(est.point)
        vs.append(est.se**2)
        warns.extend(est.warnings)
    pe = pool(pts, vs, df_complete=ds.n - 2 - len(covariates))
    return CaceEstimate(method, est.estimand, pe.point, pe.se, pe.ci_low, pe.ci_high, m=pe.m, df=pe.df,
                        warnings=sorted(set(warns)))


def write_imputations(imp: ImputedSet, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, d in enumerate(imp.datasets, start=1):
        p = directory / f"imputation_{k:03d}.csv"
        write_csv(d, p, include_class=True)
        paths.append(p)
    return paths
