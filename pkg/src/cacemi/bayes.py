"""Bayesian data-augmentation sampler for the compliance mixture model.

Each sweep draws, in turn: latent classes, missing outcomes, ``pi``, the
regression coefficients, and (identity link) the residual precision.
Coefficients have independent normal priors; under the identity link their
full conditional is normal, under the logit link they are updated by a
random-walk Metropolis step whose scale adapts during burn-in.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .data import CONTINUOUS, Dataset, ensure_compliance
from .errors import DataError, NumericalError
from .estimates import DIFFERENCE, LOG_OR, CaceEstimate
from .mixture import MixtureModelSpec, design, em_fit, extra_matrix

log = logging.getLogger(__name__)

RHAT_WARN = 1.1
TARGET_ACCEPT = 0.3


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.

    ``beta_precision`` is the precision of the zero-mean normal prior on
    every regression coefficient. ``sigma_shape``/``sigma_rate`` define a
    Gamma prior placed on the residual precision by default, or on the
    residual SD itself when ``gamma_on_sd`` is set.
    """

    beta_precision: float = 0.001
    sigma_shape: float = 0.01
    sigma_rate: float = 0.01
    pi_alpha: float = 1.0
    pi_beta: float = 1.0
    gamma_on_sd: bool = False

    def __post_init__(self):
        for name in ("beta_precision", "sigma_shape", "sigma_rate", "pi_alpha", "pi_beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")

    @classmethod
    def for_outcome(cls, outcome_kind: str, **kw) -> "PriorSpec":
        if outcome_kind == CONTINUOUS:
            return cls(**kw)
        return cls(**{"beta_precision": 0.02, **kw})


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 2
    iterations: int = 10000
    burn_in: int = 5000
    seed: int = 0
    n_jobs: int = 1
    init: str = "auto"

    def __post_init__(self):
        if self.init not in ("auto", "prior", "dispersed"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be nonnegative and below iterations")


@dataclass
class ChainSamples:
    """Post-burn-in draws, shape ``(chains, kept, n_params)``."""

    names: tuple[str, ...]
    draws: np.ndarray
    acceptance: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]


def _prior_start(spec, priors, p, rng):
    beta = rng.standard_normal(p) / math.sqrt(priors.beta_precision)
    pi = rng.beta(priors.pi_alpha, priors.pi_beta)
    if spec.binary:
        sigma = 1.0
    elif priors.gamma_on_sd:
        sigma = rng.gamma(priors.sigma_shape, 1.0 / priors.sigma_rate)
    else:
        tau = rng.gamma(priors.sigma_shape, 1.0 / priors.sigma_rate)
        sigma = 1.0 / math.sqrt(tau)
    # Gamma(0.01, 0.01) draws can underflow to zero or overflow
    sigma = float(np.clip(sigma, 1e-3, 1e3))
    pi = float(np.clip(pi, 1e-6, 1 - 1e-6))
    return beta, sigma, pi


def _mle_start(ds, spec):
    theta, fit = em_fit(ds, spec, compute_se=False)
    sigma = 1.0 if spec.binary else theta.sigma
    return theta.beta, sigma, theta.pi


def _dispersed_start(ds, spec, mle, rng, spread: float = 3.0):
    beta, sigma, pi = mle
    c = np.where(np.isnan(ds.c), pi, ds.c)
    w = ~np.isnan(ds.y)
    X = design(c, ds.z, extra_matrix(ds, spec))[w]
    if spec.binary:
        pr = 1.0 / (1.0 + np.exp(-(X @ beta)))
        info = (X * (pr * (1 - pr))[:, None]).T @ X
    else:
        info = X.T @ X / sigma**2
    sd = np.sqrt(np.diag(linalg.inv(info)))
    beta = beta + spread * sd * rng.standard_normal(len(beta))
    lp = math.log(pi / (1 - pi)) + spread * rng.standard_normal() / math.sqrt(ds.n * pi * (1 - pi))
    if not spec.binary:
        sigma = sigma * math.exp(spread * rng.standard_normal() / math.sqrt(2.0 * ds.n))
    return beta, sigma, 1.0 / (1.0 + math.exp(-lp))


def _logit_loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _run_chain(ds: Dataset, spec: MixtureModelSpec, priors: PriorSpec, cfg: McmcConfig, chain: int,
               start, proposal_chol):
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(chain)]))
    n = ds.n
    xe = extra_matrix(ds, spec)
    if np.isnan(xe).any():
        raise DataError("extra covariates in the mixture model may not be missing")
    z = ds.z.astype(float)
    latent = np.isnan(ds.c)
    miss = np.isnan(ds.y)
    lat_obs = np.nonzero(latent & ~miss)[0]
    lat_mis = np.nonzero(latent & miss)[0]
    miss_idx = np.nonzero(miss)[0]
    c = ds.c.copy()
    y = ds.y.copy()
    p = 3 + xe.shape[1]
    if start is None:
        beta, sigma, pi = _prior_start(spec, priors, p, rng)
    else:
        beta, sigma, pi = (np.array(start[0], dtype=float), float(start[1]), float(start[2]))
    c[latent] = (rng.random(int(latent.sum())) < pi).astype(float)
    if len(miss_idx):
        y[miss_idx] = 0.0
    prior_prec = priors.beta_precision * np.eye(p)
    log_scale = math.log(2.38 / math.sqrt(p))
    L_prop = proposal_chol
    n_keep = cfg.iterations - cfg.burn_in
    width = p + (0 if spec.binary else 1) + 1
    out = np.empty((n_keep, width))
    accepted = 0
    X = np.column_stack([np.ones(n), c, c * z, xe])
    ll_cur = None
    for it in range(cfg.iterations):
        # latent classes; records without an outcome draw from pi
        if len(lat_obs):
            e0 = beta[0] + xe[lat_obs] @ beta[3:]
            e1 = e0 + beta[1] + beta[2] * z[lat_obs]
            post = _kernels.class_posterior(y[lat_obs], e1, e0, pi, sigma, spec.binary)
            c[lat_obs] = (rng.random(len(lat_obs)) < post).astype(float)
        if len(lat_mis):
            c[lat_mis] = (rng.random(len(lat_mis)) < pi).astype(float)
        X[:, 1] = c
        X[:, 2] = c * z
        # missing outcomes
        if len(miss_idx):
            eta = X[miss_idx] @ beta
            if spec.binary:
                y[miss_idx] = (rng.random(len(miss_idx)) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
            else:
                y[miss_idx] = eta + sigma * rng.standard_normal(len(miss_idx))
        # pi
        s = float(c.sum())
        pi = rng.beta(priors.pi_alpha + s, priors.pi_beta + n - s)
        pi = min(max(pi, 1e-12), 1 - 1e-12)
        # regression coefficients
        if spec.binary:
            ll_cur = _logit_loglik(X, y, beta)
            prop = beta + math.exp(log_scale) * (L_prop @ rng.standard_normal(p))
            ll_new = _logit_loglik(X, y, prop)
            if not math.isfinite(ll_new) or not math.isfinite(ll_cur):
                raise NumericalError(f"non-finite log-likelihood at sweep {it} (chain {chain})")
            log_r = (ll_new - 0.5 * priors.beta_precision * float(prop @ prop)
                     - ll_cur + 0.5 * priors.beta_precision * float(beta @ beta))
            acc = math.log(rng.random()) < log_r
            if acc:
                beta = prop
            if it < cfg.burn_in:
                log_scale += (float(acc) - TARGET_ACCEPT) / (it + 1) ** 0.6
            else:
                accepted += acc
        else:
            tau = 1.0 / sigma**2
            xtx, xty = X.T @ X, X.T @ y
            prec = tau * xtx + prior_prec
            Lp = linalg.cholesky(prec, lower=True)
            mean = linalg.cho_solve((Lp, True), tau * xty)
            beta = mean + linalg.solve_triangular(Lp.T, rng.standard_normal(p), lower=False)
            r = y - X @ beta
            rss = float(r @ r)
            if not math.isfinite(rss):
                raise NumericalError(f"non-finite residual sum of squares at sweep {it} (chain {chain})")
            if priors.gamma_on_sd:
                sigma = _sigma_mh(sigma, rss, n, priors, rng)
            else:
                tau = rng.gamma(priors.sigma_shape + 0.5 * n, 1.0 / (priors.sigma_rate + 0.5 * rss))
                sigma = 1.0 / math.sqrt(tau)
        if it >= cfg.burn_in:
            row = out[it - cfg.burn_in]
            row[:p] = beta
            if not spec.binary:
                row[p] = sigma
            row[-1] = pi
    rate = accepted / n_keep if spec.binary else 1.0
    return out, rate


def _sigma_mh(sigma, rss, n, priors, rng):
    """Random-walk step on log sigma under a Gamma prior on sigma itself."""

    def target(s):
        return (-n * math.log(s) - 0.5 * rss / s**2
                + (priors.sigma_shape - 1.0) * math.log(s) - priors.sigma_rate * s + math.log(s))

    step = 1.0 / math.sqrt(max(2.0 * n, 1.0))
    prop = sigma * math.exp(step * rng.standard_normal())
    if math.log(rng.random()) < target(prop) - target(sigma):
        return prop
    return sigma


def _chain_task(args):
    return _run_chain(*args)


def gibbs_run(ds: Dataset, spec: MixtureModelSpec | None = None, priors: PriorSpec | None = None,
              cfg: McmcConfig | None = None) -> ChainSamples:
    """Run ``cfg.chains`` chains.

    Chain 0 starts at the EM estimate. Later chains start from prior draws
    (``init="prior"``) or from the EM estimate plus noise three times the
    asymptotic SD (``init="dispersed"``). ``init="auto"`` uses prior draws
    under the identity link and dispersed starts under the logit link, where
    a chain started far out in the vague prior can sit on a near-separated
    ridge for thousands of sweeps. Chain ``k`` is seeded from
    ``SeedSequence([cfg.seed, k])``.
    """
    spec = spec or MixtureModelSpec.for_dataset(ds)
    priors = priors or PriorSpec.for_outcome(ds.outcome_kind)
    cfg = cfg or McmcConfig()
    spec.check(ds)
    ds = ensure_compliance(ds)
    p = 3 + len(spec.extra_covariates)
    warns = []
    mle = None
    info = np.zeros((p, p))
    if ds.n > 0:
        try:
            mle = _mle_start(ds, spec)
        except (NumericalError, DataError) as exc:
            warns.append(f"EM start failed ({exc}); all chains start from prior draws")
    if spec.binary:
        if mle is not None:
            c = np.where(np.isnan(ds.c), mle[2], ds.c)
            X = design(c, ds.z, extra_matrix(ds, spec))
            w = ~np.isnan(ds.y)
            eta = X[w] @ mle[0]
            pr = 1.0 / (1.0 + np.exp(-eta))
            info = (X[w] * (pr * (1 - pr))[:, None]).T @ X[w]
        cov = linalg.inv(info + priors.beta_precision * np.eye(p))
        proposal = linalg.cholesky(cov, lower=True)
    else:
        proposal = None
    init = cfg.init
    if init == "auto":
        init = "dispersed" if spec.binary else "prior"
    starts = [mle]
    for k in range(1, cfg.chains):
        if init == "dispersed" and mle is not None:
            starts.append(_dispersed_start(ds, spec, mle, np.random.default_rng([int(cfg.seed), k, 1])))
        else:
            starts.append(None)
    tasks = [(ds, spec, priors, cfg, k, starts[k], proposal) for k in range(cfg.chains)]
    if cfg.n_jobs > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_jobs, cfg.chains)) as ex:
            results = list(ex.map(_chain_task, tasks))
    else:
        results = [_chain_task(t) for t in tasks]
    names = (*spec.names, *(() if spec.binary else ("sigma",)), "pi")
    draws = np.stack([r[0] for r in results])
    rates = [r[1] for r in results]
    if spec.binary:
        for k, a in enumerate(rates):
            if not 0.1 <= a <= 0.6:
                warns.append(f"chain {k} Metropolis acceptance rate {a:.2f} outside [0.1, 0.6]")
    return ChainSamples(names=names, draws=draws, acceptance=rates, warnings=warns)


def gelman_rubin(chains: np.ndarray) -> float:
    """Potential scale reduction factor for draws of shape ``(chains, n)``."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    if m < 2 or n < 2:
        return math.nan
    if np.ptp(chains) == 0.0:
        return 1.0
    w = float(np.mean(np.var(chains, axis=1, ddof=1)))
    b = n * float(np.var(np.mean(chains, axis=1), ddof=1))
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


def posterior_summary(samples, param: str = "beta_cz", method: str = "bayes",
                      estimand: str = DIFFERENCE):
    """Median, SD and equal-tailed 95% interval of pooled draws.

    ``samples`` is a :class:`ChainSamples` or an array of shape
    ``(chains, draws)``. Returns ``(estimate, diagnostics)`` where the
    diagnostics hold R-hat for every parameter.
    """
    if isinstance(samples, ChainSamples):
        target = samples.param(param)
        rhat = {nm: gelman_rubin(samples.draws[:, :, i]) for i, nm in enumerate(samples.names)}
        warns = list(samples.warnings)
    else:
        target = np.asarray(samples, dtype=float)
        if target.ndim == 1:
            target = target[None, :]
        rhat = {param: gelman_rubin(target)}
        warns = []
    if target.shape[0] < 2:
        raise DataError("posterior summary needs at least two chains")
    flat = target.ravel()
    lo, med, hi = np.quantile(flat, [0.025, 0.5, 0.975])
    sd = float(np.std(flat, ddof=1))
    diag = {"rhat": rhat, "constant": bool(sd == 0.0), "n_draws": int(flat.size)}
    if diag["constant"]:
        warns.append(f"posterior draws of {param} are constant")
    r = rhat.get(param, math.nan)
    if math.isfinite(r) and r > RHAT_WARN or r == math.inf:
        warns.append(f"R-hat for {param} is {r:.3f} (> {RHAT_WARN}); chains may not have converged")
    est = CaceEstimate(method, estimand, float(med), sd, float(lo), float(hi), warnings=warns,
                       extra={"rhat": r})
    return est, diag


def bayes_estimate(ds: Dataset, spec: MixtureModelSpec | None = None, priors: PriorSpec | None = None,
                   cfg: McmcConfig | None = None) -> CaceEstimate:
    spec = spec or MixtureModelSpec.for_dataset(ds)
    samples = gibbs_run(ds, spec, priors, cfg)
    est, _ = posterior_summary(samples, "beta_cz", estimand=LOG_OR if spec.binary else DIFFERENCE)
    return est


def write_samples(samples: ChainSamples, path) -> None:
    """Write draws as CSV with ``chain`` and ``draw`` index columns."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["chain", "draw", *samples.names])
        for k in range(samples.draws.shape[0]):
            for i, row in enumerate(samples.draws[k]):
                wr.writerow([k + 1, i + 1, *(repr(float(v)) for v in row)])
