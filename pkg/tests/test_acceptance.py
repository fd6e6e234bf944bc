"""Acceptance suite.

Every criterion runs at its stated tolerance. Replication criteria use 500
replications per scenario at N=1000; they take tens of minutes on one core.
Set CACEMI_THREADS to spread replications over more workers (results do not
depend on the worker count).
"""
import math
import os

import numpy as np
import pytest
from scipy import stats

from cacemi.data import BINARY, CONTINUOUS, TrialRecord
from cacemi.mixture import MixtureModelSpec, MixtureParams, design, em_fit
from cacemi.glm import fit_linear, fit_logistic
from cacemi.pooling import pool
from cacemi.simulation import (MethodOptions, ScenarioConfig, complier_fraction, generate_dataset,
                               run_scenario)
from cacemi.smcmic import (impute_class_direct, impute_class_rejection, sample_classes_direct,
                           sample_classes_rejection)
from cacemi.twostage import tsls, wald_estimate

from conftest import ACCEPTANCE_LINES, make_dataset, random_trial

REPS = 500
THREADS = int(os.environ.get("CACEMI_THREADS", "1"))
# Bayesian chains are shortened to 2000 iterations (1000 burn-in) for desk scale.
OPTS = MethodOptions(chains=2, mcmc_iterations=2000, burn_in=1000)


def report(k, ok, detail):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


_CACHE = {}


def scenario(name):
    if name not in _CACHE:
        cfg, methods = {
            "cont": (ScenarioConfig(n=1000, psi0=0.85, beta_cz=2.0, replications=REPS),
                     ("bayes", "smc-mic", "tsls")),
            "bin_zero": (ScenarioConfig(n=1000, psi0=0.85, outcome_kind=BINARY, beta_cz=2.0,
                                        replications=REPS), ("smc-mic", "tsri")),
            "bin_half": (ScenarioConfig(n=1000, psi0=0.85, outcome_kind=BINARY, beta_cz=2.0,
                                        beta_c_rule="half", replications=REPS), ("bayes", "smc-mic", "tsri")),
            "cont_mar": (ScenarioConfig(n=1000, psi0=0.85, beta_cz=2.0, missing_y="mar20", replications=REPS),
                         ("smc-mic", "tsls")),
        }[name]
        _CACHE[name] = run_scenario(cfg, methods, n_jobs=THREADS, opts=OPTS)
    return _CACHE[name]


def _fmt_metrics(res, mth):
    m = res.methods[mth]
    return f"{mth}: relbias={m.rel_bias:+.4f} cov={m.coverage:.3f} rmse={m.rmse:.4f}"


# --- 1 ---------------------------------------------------------------------

def test_c01_wald_equals_tsls():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(20, 400))
        ds, _ = random_trial(rng, n=n, pi=rng.uniform(0.2, 0.9), b=tuple(rng.normal(0, 2, 3)),
                             sigma=rng.uniform(0.2, 3))
        worst = max(worst, abs(wald_estimate(ds).point - tsls(ds).point))
    assert report(1, worst < 1e-10, f"max |wald - tsls| = {worst:.2e} over 1000 datasets (tol 1e-10)")


# --- 2 ---------------------------------------------------------------------

def _grid():
    rng = np.random.default_rng(202)
    out = []
    for k in range(20):
        binary = k % 4 == 3
        theta = MixtureParams(*rng.normal(0, 1.5, 3), pi=rng.uniform(0.1, 0.9),
                              sigma=None if binary else rng.uniform(0.5, 2.0))
        y = float(rng.integers(0, 2)) if binary else float(rng.normal(0, 2))
        # latent classes only arise in the control arm
        out.append((MixtureModelSpec("logit" if binary else "identity"), theta, TrialRecord(k, 0, 0, y)))
    return out


def test_c02_rejection_matches_direct():
    draws = 100_000
    pvals = []
    for k, (spec, theta, rec) in enumerate(_grid()):
        rng = np.random.default_rng([203, k])
        # per-record entry points, as used on single records
        a = [impute_class_rejection(rec, theta, spec, rng)[0] for _ in range(200)]
        b = [impute_class_direct(rec, theta, spec, rng) for _ in range(200)]
        assert set(a) <= {0, 1} and set(b) <= {0, 1}
        # the same samplers, vectorised over 100,000 copies of the record
        y = np.full(draws, rec.y)
        e0 = np.full(draws, theta.beta0)
        e1 = e0 + theta.beta_c
        sigma = 1.0 if spec.binary else theta.sigma
        rej, _ = sample_classes_rejection(y, e1, e0, theta.pi, sigma, spec.binary, rng, 5000)
        dirc = sample_classes_direct(y, e1, e0, theta.pi, sigma, spec.binary, rng)
        table = np.array([[rej.sum(), draws - rej.sum()], [dirc.sum(), draws - dirc.sum()]])
        if table[:, 0].sum() == 0 or table[:, 1].sum() == 0:
            pvals.append(1.0)
        elif stats.contingency.expected_freq(table).min() < 5:
            # sparse cell: exact test instead of the chi-square approximation
            pvals.append(stats.fisher_exact(table)[1])
        else:
            pvals.append(stats.chi2_contingency(table, correction=False)[1])
    ok = min(pvals) > 0.001
    assert report(2, ok, f"min chi-square p = {min(pvals):.4f} over 20 configurations, 100,000 draws each")


# --- 3 ---------------------------------------------------------------------

def test_c03_em_correctness():
    rng = np.random.default_rng(303)
    coef_err = 0.0
    for k in range(20):
        kind = BINARY if k % 2 else CONTINUOUS
        ds, c = random_trial(rng, n=400, kind=kind, with_x=True)
        ds = ds.replace(c=c.astype(float))
        spec = MixtureModelSpec.for_dataset(ds, ("x",))
        th, _ = em_fit(ds, spec, compute_se=False)
        X = design(c, ds.z, ds.x)
        ref = fit_logistic(X, ds.y) if kind == BINARY else fit_linear(X, ds.y)
        coef_err = max(coef_err, float(np.abs(th.beta - ref.coef).max()))
    worst_drop = 0.0
    for k in range(100):
        kind = BINARY if k % 2 else CONTINUOUS
        ds, _ = random_trial(rng, n=int(rng.integers(100, 500)), kind=kind, pi=rng.uniform(0.3, 0.9),
                             b=(0.0, rng.normal(0, 1), rng.normal(1, 1)), miss=rng.uniform(0, 0.3))
        _, fit = em_fit(ds, MixtureModelSpec.for_dataset(ds), compute_se=False)
        worst_drop = max(worst_drop, float(-np.diff(fit.trace).min(initial=0.0)))
    ok = coef_err < 1e-8 and worst_drop <= 1e-10
    assert report(3, ok, f"max |EM - GLM| = {coef_err:.2e}; largest loglik decrease = {worst_drop:.2e} "
                         "over 100 EM runs")


# --- 4 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c04_continuous_replication():
    res = scenario("cont")
    ok = not res.failed
    for mth in ("bayes", "smc-mic", "tsls"):
        m = res.methods[mth]
        ok &= abs(m.rel_bias) < 0.05 and 0.925 <= m.coverage <= 0.975
    ok &= res.methods["smc-mic"].rmse <= res.methods["tsls"].rmse
    detail = "; ".join(_fmt_metrics(res, m) for m in ("bayes", "smc-mic", "tsls"))
    assert report(4, ok, detail)


# --- 5 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c05_binary_replication():
    res = scenario("bin_zero")
    ok = not res.failed
    for mth in ("smc-mic", "tsri"):
        m = res.methods[mth]
        ok &= abs(m.rel_bias) < 0.05 and 0.92 <= m.coverage <= 0.98
    detail = f"truth={res.truth:.5f}; " + "; ".join(_fmt_metrics(res, m) for m in ("smc-mic", "tsri"))
    assert report(5, ok, detail)


# --- 6 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c06_tsri_inconsistency():
    res = scenario("bin_half")
    tsri_rb = res.methods["tsri"].rel_bias
    # the reported bias for this cell is positive
    ok = 0.05 <= tsri_rb <= 0.25 and not res.failed
    for mth in ("smc-mic", "bayes"):
        ok &= abs(res.methods[mth].rel_bias) < 0.05
    detail = f"truth={res.truth:.5f}; " + "; ".join(_fmt_metrics(res, m) for m in ("tsri", "smc-mic", "bayes"))
    assert report(6, ok, detail)


# --- 7 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c07_missing_outcomes():
    res = scenario("cont_mar")
    smc = res.methods["smc-mic"]
    ts = res.methods["tsls"]
    ok = abs(smc.rel_bias) < 0.05 and ts.coverage >= 0.92 and not res.failed
    detail = f"{_fmt_metrics(res, 'smc-mic')}; FCS-then-{_fmt_metrics(res, 'tsls')}"
    assert report(7, ok, detail)


# --- 8 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c08_bayes_smc_agreement():
    res = scenario("cont")
    by = {(r.replication, r.method): r for r in res.records if r.error is None}
    reps = sorted({r for r, m in by if (r, "bayes") in by and (r, "smc-mic") in by})
    gap = np.mean([abs(by[r, "bayes"].point - by[r, "smc-mic"].point) for r in reps])
    se = np.mean([by[r, "smc-mic"].se for r in reps])
    ok = gap < 0.5 * se
    assert report(8, ok, f"mean |bayes - smc-mic| = {gap:.4f}; 0.5 x mean pooled SE = {0.5 * se:.4f} "
                         f"({len(reps)} replications)")


# --- 9 ---------------------------------------------------------------------

def test_c09_rubin_identities():
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(500):
        m = int(rng.integers(2, 30))
        q = rng.normal(0, 3, m)
        u = rng.uniform(0.01, 4, m)
        # no between-imputation variance
        flat = pool(np.full(m, q[0]), u)
        worst = max(worst, abs(flat.point - q[0]), abs(flat.total_var - u.mean()), flat.between_var)
        # affine maps of the estimand
        a, b = rng.normal(0, 5), rng.normal(0, 3)
        base = pool(q, u)
        aff = pool(a + b * q, b * b * u)
        worst = max(worst, abs(aff.point - (a + b * base.point)) / max(1, abs(aff.point)),
                    abs(aff.total_var - b * b * base.total_var) / max(1, aff.total_var),
                    abs(aff.df - base.df) / max(1, base.df) if math.isfinite(base.df) else 0.0)
        # order of the imputations
        perm = rng.permutation(m)
        pp = pool(q[perm], u[perm])
        worst = max(worst, abs(pp.point - base.point), abs(pp.total_var - base.total_var) / base.total_var)
    assert report(9, worst <= 1e-12, f"largest deviation from the pooling identities = {worst:.2e} (tol 1e-12)")


# --- 10 --------------------------------------------------------------------

def test_c10_dgp_calibration():
    errs = []
    for psi0 in (0.85, 0.5):
        cfg = ScenarioConfig(n=1_000_000, psi0=psi0, missing_y="mar20")
        ds, tr = generate_dataset(cfg, np.random.default_rng([1010, int(psi0 * 100)]))
        errs.append(("complier", psi0, abs(tr.c.mean() - complier_fraction(psi0, cfg.psi_x1))))
        errs.append(("missing", psi0, abs(np.isnan(ds.y).mean() - 0.20)))
        errs.append(("corr", psi0, abs(np.corrcoef(tr.x1, ds.x[:, 0])[0, 1] - 0.3)))
    worst = max(e[2] for e in errs)
    detail = ", ".join(f"{k}(psi0={p}) {e:.4f}" for k, p, e in errs)
    assert report(10, worst < 0.01, f"max deviation {worst:.4f} (tol 0.01): {detail}")
