"""Factorial simulation study: data generation, empirical truth, metrics, runner."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit

from .data import BINARY, CONTINUOUS, Dataset
from .errors import CaceError, DataError
from .estimates import CaceEstimate

log = logging.getLogger(__name__)

BETA0 = 0.0
BETA_X1 = -2.2
BETA_X2 = 0.5
COV_X12 = 0.3
MISS_SLOPE = math.log(2.0)
MISS_INTERCEPT_LITERAL = -1.386294
TRUTH_N = 10_000_000


def _mean_expit_normal(a: float, b: float) -> float:
    """E[expit(a + b X)] for X ~ N(0, 1), by quadrature."""
    f = lambda x: expit(a + b * x) * math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)  # noqa: E731
    return integrate.quad(f, -12, 12, epsabs=1e-13, epsrel=1e-12)[0]


@lru_cache(maxsize=None)
def calibrated_missing_intercept(target: float = 0.20, slope: float = MISS_SLOPE) -> float:
    """Intercept of the logistic missingness model giving marginal rate ``target``."""
    return optimize.brentq(lambda a: _mean_expit_normal(a, slope) - target, -10, 10, xtol=1e-14)


def complier_fraction(psi0: float, psi_x1: float) -> float:
    """Population share of compliers, E[expit(psi0 + psi_x1 X1)]."""
    return _mean_expit_normal(psi0, psi_x1)


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 1000
    psi0: float = 0.85
    outcome_kind: str = CONTINUOUS
    beta_cz: float = 2.0
    beta_c_rule: str = "zero"
    missing_y: str = "none"
    replications: int = 500
    seed: int = 2024
    psi_x1: float = 1.0
    missing_intercept: str | float = "calibrated"

    def __post_init__(self):
        if self.outcome_kind not in (CONTINUOUS, BINARY):
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.beta_c_rule not in ("zero", "half"):
            raise DataError(f"beta_c_rule must be 'zero' or 'half', got {self.beta_c_rule!r}")
        if self.beta_c_rule == "half" and self.outcome_kind != BINARY:
            raise DataError("beta_c_rule='half' is only defined for binary outcomes")
        if self.missing_y not in ("none", "mar20"):
            raise DataError(f"missing_y must be 'none' or 'mar20', got {self.missing_y!r}")
        if self.n < 4 or self.replications < 1:
            raise DataError("n must be >= 4 and replications >= 1")

    @property
    def beta_c(self) -> float:
        return self.beta_cz / 2.0 if self.beta_c_rule == "half" else 0.0

    @property
    def miss_intercept(self) -> float:
        if self.missing_intercept == "calibrated":
            return calibrated_missing_intercept()
        if self.missing_intercept == "literal":
            return MISS_INTERCEPT_LITERAL
        return float(self.missing_intercept)

    @property
    def label(self) -> str:
        parts = [f"n{self.n}", f"psi{self.psi0:g}", self.outcome_kind[:3], f"bcz{self.beta_cz:g}",
                 f"bc-{self.beta_c_rule}", self.missing_y]
        return "_".join(parts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DataError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Truth:
    """Hidden quantities behind a generated dataset."""

    x1: np.ndarray
    c: np.ndarray
    y_full: np.ndarray


def _covariates(n, rng):
    cov = np.array([[1.0, COV_X12], [COV_X12, 1.0]])
    return rng.multivariate_normal(np.zeros(2), cov, size=n, method="cholesky")


def generate_dataset(cfg: ScenarioConfig, rng) -> tuple[Dataset, Truth]:
    """Simulate one trial. ``X1`` is the unmeasured confounder and is not emitted."""
    n = cfg.n
    x = _covariates(n, rng)
    x1, x2 = x[:, 0], x[:, 1]
    z = (rng.random(n) < 0.5).astype(np.int8)
    c = (rng.random(n) < expit(cfg.psi0 + cfg.psi_x1 * x1)).astype(np.int8)
    d = (c * z).astype(np.int8)
    eta = BETA0 + cfg.beta_c * c + cfg.beta_cz * c * z + BETA_X1 * x1 + BETA_X2 * x2
    if cfg.outcome_kind == CONTINUOUS:
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.random(n) < expit(eta)).astype(float)
    y_obs = y.copy()
    if cfg.missing_y == "mar20":
        miss = rng.random(n) < expit(cfg.miss_intercept + MISS_SLOPE * x2)
        y_obs[miss] = np.nan
    ds = Dataset(ids=np.arange(1, n + 1), z=z, d=d, y=y_obs, x=x2[:, None], covariate_names=("x2",),
                 outcome_kind=cfg.outcome_kind)
    return ds, Truth(x1=x1, c=c, y_full=y)


@lru_cache(maxsize=None)
def _binary_truth(psi0: float, psi_x1: float, beta_c: float, beta_cz: float, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    chunk = 1_000_000
    s1 = s0 = 0.0
    nc = 0
    left = n
    while left > 0:
        k = min(chunk, left)
        left -= k
        x = _covariates(k, rng)
        c = rng.random(k) < expit(psi0 + psi_x1 * x[:, 0])
        lin = BETA0 + BETA_X1 * x[c, 0] + BETA_X2 * x[c, 1] + beta_c
        s1 += math.fsum(expit(lin + beta_cz))
        s0 += math.fsum(expit(lin))
        nc += int(c.sum())
    p1, p0 = s1 / nc, s0 / nc
    return math.log(p1 / (1 - p1)) - math.log(p0 / (1 - p0))


def empirical_truth(cfg: ScenarioConfig, n: int = TRUTH_N, seed: int = 20180101) -> float:
    """Marginal CACE on the analysis scale.

    Continuous outcomes: ``beta_cz``. Binary outcomes: the complier log odds
    ratio between potential outcomes under each arm, averaged over the
    covariate distribution of ``n`` simulated individuals (the individual
    potential-outcome probabilities are averaged, not sampled).
    """
    if cfg.outcome_kind == CONTINUOUS:
        return float(cfg.beta_cz)
    return _binary_truth(float(cfg.psi0), float(cfg.psi_x1), float(cfg.beta_c), float(cfg.beta_cz),
                         int(n), int(seed))


@dataclass
class Metrics:
    nrep: int
    bias: float
    rel_bias: float
    mce_low: float | None
    mce_high: float | None
    coverage: float
    ci_width: float
    rmse: float
    empirical_se: float | None
    mean_se: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(points, ci_los, ci_his, truth: float, ses=None) -> Metrics:
    """Bias with Monte Carlo error CI, coverage, mean CI width and RMSE."""
    q = np.asarray(points, dtype=float)
    lo = np.asarray(ci_los, dtype=float)
    hi = np.asarray(ci_his, dtype=float)
    k = len(q)
    if k == 0:
        raise DataError("no replications to summarise")
    bias = float(np.mean(q) - truth)
    if k >= 2:
        sd = float(np.std(q, ddof=1))
        half = 1.96 * sd / math.sqrt(k)
        mce = (bias - half, bias + half)
    else:
        sd = None
        mce = (None, None)
    cover = float(np.mean((lo <= truth) & (truth <= hi)))
    width = float(np.mean(hi - lo))
    rmse = float(math.sqrt(np.mean((q - truth) ** 2)))
    rel = bias / truth if truth != 0 else math.nan
    mean_se = float(np.mean(ses)) if ses is not None else math.nan
    return Metrics(k, bias, rel, mce[0], mce[1], cover, width, rmse, sd, mean_se)


# --- replication runner -----------------------------------------------------

DEFAULT_METHODS = {CONTINUOUS: ("bayes", "smc-mic", "tsls"), BINARY: ("bayes", "smc-mic", "tsri")}


@dataclass
class MethodOptions:
    """Tuning for the estimators used inside replications."""

    m: int = 10
    iterations: int = 250
    rejection_cap: int = 5000
    chains: int = 2
    mcmc_iterations: int = 2000
    burn_in: int = 1000
    n_boot: int = 500
    n_boot_mi: int = 200


def _estimate_one(method: str, ds: Dataset, cfg: ScenarioConfig, opts: MethodOptions, seed: int) -> CaceEstimate:
    # Imported lazily: estimators import this module's constants indirectly.
    from . import bayes, smcmic, twostage
    from .mixture import MixtureModelSpec

    aux = ("x2",) if cfg.missing_y == "mar20" else ()
    if method in ("tsls", "tsri", "wald"):
        if ds.missing_y.any():
            icfg = smcmic.ImputationConfig(m=opts.m, aux_covariates=("x2",), seed=seed)
            return smcmic.estimate_after_fcs(ds, method, icfg, n_boot=opts.n_boot_mi)
        if method == "tsls":
            return twostage.tsls(ds)
        if method == "wald":
            return twostage.wald_estimate(ds)
        return twostage.tsri(ds, n_boot=opts.n_boot, seed=seed)
    if method == "smc-mic":
        icfg = smcmic.ImputationConfig(m=opts.m, iterations=opts.iterations, rejection_cap=opts.rejection_cap,
                                       aux_covariates=aux, seed=seed)
        return smcmic.smc_mic_estimate(ds, icfg)
    if method == "bayes":
        spec = MixtureModelSpec.for_dataset(ds, aux)
        priors = bayes.PriorSpec.for_outcome(ds.outcome_kind)
        mcfg = bayes.McmcConfig(chains=opts.chains, iterations=opts.mcmc_iterations, burn_in=opts.burn_in,
                                seed=seed)
        return bayes.bayes_estimate(ds, spec, priors, mcfg)
    if method == "ml-mixture":
        spec = MixtureModelSpec.for_dataset(ds)
        return smcmic.ml_mixture_estimate(ds, spec)
    raise DataError(f"unknown method {method!r}")


def replication_seed(scenario_seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(scenario_seed), int(r)])


@dataclass
class ReplicationRecord:
    replication: int
    method: str
    point: float = math.nan
    se: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    error: str | None = None


def run_replication(cfg: ScenarioConfig, methods: Sequence[str], r: int,
                    opts: MethodOptions | None = None) -> list[ReplicationRecord]:
    opts = opts or MethodOptions()
    ss = replication_seed(cfg.seed, r)
    data_ss, est_ss = ss.spawn(2)
    ds, _ = generate_dataset(cfg, np.random.default_rng(data_ss))
    est_seed = int(est_ss.generate_state(1)[0])
    out = []
    for method in methods:
        try:
            est = _estimate_one(method, ds, cfg, opts, est_seed)
        except (CaceError, np.linalg.LinAlgError) as exc:
            log.warning("replication %d, %s failed: %s", r, method, exc)
            out.append(ReplicationRecord(r, method, error=str(exc)))
            continue
        out.append(ReplicationRecord(r, method, est.point, est.se, est.ci_low, est.ci_high))
    return out


def _run_chunk(args):
    cfg, methods, reps, opts = args
    rows = []
    for r in reps:
        rows.extend(run_replication(cfg, methods, r, opts))
    return rows


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    truth: float
    methods: dict[str, Metrics | None]
    nrep_effective: dict[str, int]
    failures: dict[str, int]
    records: list[ReplicationRecord] = field(default_factory=list)
    failed: bool = False
    notes: list[str] = field(default_factory=list)


def summarise(cfg: ScenarioConfig, methods: Sequence[str], rows: Sequence[ReplicationRecord],
              truth: float, max_fail: float = 0.05) -> ScenarioResult:
    per = {}
    neff = {}
    fails = {}
    notes = []
    failed = False
    for mth in methods:
        ok = [r for r in rows if r.method == mth and r.error is None]
        nfail = sum(1 for r in rows if r.method == mth and r.error is not None)
        neff[mth] = len(ok)
        fails[mth] = nfail
        if nfail > max_fail * cfg.replications:
            failed = True
            notes.append(f"{mth}: {nfail} of {cfg.replications} replications failed")
        if ok:
            m = metrics([r.point for r in ok], [r.ci_low for r in ok], [r.ci_high for r in ok], truth,
                        ses=[r.se for r in ok])
            if m.mce_low is None:
                notes.append(f"{mth}: a single replication; Monte Carlo error undefined")
            per[mth] = m
        else:
            per[mth] = None
    return ScenarioResult(cfg, truth, per, neff, fails, list(rows), failed, notes)


def run_scenario(cfg: ScenarioConfig, methods: Sequence[str] | None = None, n_jobs: int = 1,
                 opts: MethodOptions | None = None,
                 progress: Callable[[int], None] | None = None) -> ScenarioResult:
    """Run all replications of one scenario and reduce them to metrics.

    Replication ``r`` draws its data and estimator seeds from
    ``SeedSequence([cfg.seed, r])``, so results do not depend on ``n_jobs``.
    """
    methods = tuple(methods or DEFAULT_METHODS[cfg.outcome_kind])
    for mth in methods:
        if mth == "tsri" and cfg.outcome_kind != BINARY:
            raise DataError("tsri requires binary outcome")
        if mth == "tsls" and cfg.outcome_kind == BINARY:
            raise DataError("tsls is paired with continuous outcomes in the factorial")
    opts = opts or MethodOptions()
    truth = empirical_truth(cfg)
    reps = list(range(cfg.replications))
    rows: list[ReplicationRecord] = []
    if n_jobs <= 1:
        for r in reps:
            rows.extend(run_replication(cfg, methods, r, opts))
            if progress:
                progress(r)
    else:
        chunks = [reps[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            for part in ex.map(_run_chunk, [(cfg, methods, ch, opts) for ch in chunks]):
                rows.extend(part)
        rows.sort(key=lambda r: (r.replication, methods.index(r.method)))
    return summarise(cfg, methods, rows, truth)


def run_factorial(configs: Sequence[ScenarioConfig], methods: Sequence[str] | None = None,
                  n_jobs: int = 1, opts: MethodOptions | None = None) -> list[ScenarioResult]:
    return [run_scenario(cfg, methods, n_jobs, opts) for cfg in configs]


def table1_configs(replications: int = 500, seed: int = 2024) -> list[ScenarioConfig]:
    """Every cell of the published factorial design."""
    out = []
    for kind in (CONTINUOUS, BINARY):
        for rule in (("zero",) if kind == CONTINUOUS else ("zero", "half")):
            for n in (200, 1000):
                for psi0 in (0.85, 0.5):
                    for bcz in (2.0, 4.0):
                        for miss in ("none", "mar20"):
                            out.append(ScenarioConfig(n=n, psi0=psi0, outcome_kind=kind, beta_cz=bcz,
                                                      beta_c_rule=rule, missing_y=miss,
                                                      replications=replications, seed=seed))
    return out
