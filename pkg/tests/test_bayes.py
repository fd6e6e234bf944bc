import math

import numpy as np
import pytest
from scipy import stats

from cacemi.bayes import (ChainSamples, McmcConfig, PriorSpec, bayes_estimate, gelman_rubin, gibbs_run,
                          posterior_summary, write_samples)
from cacemi.data import BINARY, CONTINUOUS
from cacemi.errors import DataError
from cacemi.estimates import LOG_OR
from cacemi.glm import fit_linear
from cacemi.mixture import MixtureModelSpec, design

from conftest import make_dataset, random_trial


def _empty(kind):
    return make_dataset(np.zeros(0, int), np.zeros(0, int), np.zeros(0), kind)


PRIOR = PriorSpec(beta_precision=0.25, sigma_shape=2.0, sigma_rate=1.0, pi_alpha=2.0, pi_beta=3.0)


def _thin(a, k=5):
    return a.ravel()[::k]


def test_identity_prior_recovered_without_data():
    s = gibbs_run(_empty(CONTINUOUS), MixtureModelSpec("identity"), PRIOR,
                  McmcConfig(chains=2, iterations=6000, burn_in=1000, seed=1))
    for name in ("beta0", "beta_c", "beta_cz"):
        assert stats.kstest(_thin(s.param(name)), stats.norm(0, 2).cdf).pvalue > 0.001
    tau = 1 / _thin(s.param("sigma")) ** 2
    assert stats.kstest(tau, stats.gamma(2.0, scale=1.0).cdf).pvalue > 0.001
    assert stats.kstest(_thin(s.param("pi")), stats.beta(2, 3).cdf).pvalue > 0.001


def test_logit_prior_recovered_without_data():
    s = gibbs_run(_empty(BINARY), MixtureModelSpec("logit"), PRIOR,
                  McmcConfig(chains=2, iterations=12000, burn_in=2000, seed=2))
    for name in ("beta0", "beta_cz"):
        # random-walk draws are autocorrelated; thin harder
        assert stats.kstest(_thin(s.param(name), 20), stats.norm(0, 2).cdf).pvalue > 0.001
    assert "sigma" not in s.names


def test_sd_prior_recovered_without_data():
    pr = PriorSpec(beta_precision=0.25, sigma_shape=3.0, sigma_rate=2.0, gamma_on_sd=True)
    s = gibbs_run(_empty(CONTINUOUS), MixtureModelSpec("identity"), pr,
                  McmcConfig(chains=2, iterations=12000, burn_in=2000, seed=3))
    assert stats.kstest(_thin(s.param("sigma"), 20), stats.gamma(3.0, scale=0.5).cdf).pvalue > 0.001


def test_known_classes_posterior_matches_regression(rng):
    # with every class observed the beta posterior is the usual Bayesian regression
    ds, c = random_trial(rng, n=600)
    ds = ds.replace(c=c.astype(float))
    s = gibbs_run(ds, MixtureModelSpec("identity"), PriorSpec(),
                  McmcConfig(chains=2, iterations=4000, burn_in=500, seed=4))
    ref = fit_linear(design(c, ds.z, np.empty((ds.n, 0))), ds.y)
    draws = s.draws[:, :, :3].reshape(-1, 3)
    np.testing.assert_allclose(draws.mean(0), ref.coef, atol=3 * ref.se.max() / math.sqrt(500))
    np.testing.assert_allclose(draws.std(0), ref.se, rtol=0.08)
    assert s.param("pi").mean() == pytest.approx((c.sum() + 1) / (len(c) + 2), abs=0.01)


def test_normal_mean_conjugate():
    # one class, intercept only: beta0 | tau is normal-normal
    n = 50
    y = np.random.default_rng(0).normal(3.0, 1.0, n)
    ds = make_dataset(np.r_[np.ones(25, int), np.zeros(25, int)], np.zeros(n, int), y,
                      c=np.zeros(n))
    spec = MixtureModelSpec("identity")
    s = gibbs_run(ds, spec, PriorSpec(beta_precision=1.0, pi_alpha=1, pi_beta=1),
                  McmcConfig(chains=2, iterations=5000, burn_in=500, seed=5))
    b0 = s.param("beta0").ravel()
    tau = 1 / s.param("sigma").ravel() ** 2
    cond_mean = np.mean(tau * y.sum() / (1.0 + n * tau))
    assert b0.mean() == pytest.approx(cond_mean, abs=0.01)
    assert s.param("pi").mean() == pytest.approx(1 / 52, abs=0.005)


def test_posterior_summary_constant():
    est, diag = posterior_summary(np.full((2, 100), 0.7))
    assert est.point == 0.7 and est.ci_low == 0.7 and est.ci_high == 0.7 and est.se == 0.0
    assert diag["constant"] and diag["rhat"]["beta_cz"] == 1.0
    assert any("constant" in w for w in est.warnings)


def test_posterior_summary_normal_draws():
    d = np.random.default_rng(0).standard_normal((2, 50000))
    est, diag = posterior_summary(d)
    assert est.point == pytest.approx(0.0, abs=0.02)
    assert est.ci_low == pytest.approx(-1.96, abs=0.05)
    assert est.ci_high == pytest.approx(1.96, abs=0.05)
    assert est.se == pytest.approx(1.0, abs=0.01)
    assert diag["rhat"]["beta_cz"] < 1.01
    assert not est.warnings


def test_disjoint_chains_flagged():
    rng = np.random.default_rng(1)
    d = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    est, diag = posterior_summary(d)
    assert diag["rhat"]["beta_cz"] > 1.1
    assert any("R-hat" in w for w in est.warnings)


def test_single_chain_rejected():
    with pytest.raises(DataError):
        posterior_summary(np.zeros((1, 10)))


def test_gelman_rubin_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 200))
    n = 200
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    assert gelman_rubin(x) == pytest.approx(math.sqrt(((n - 1) / n * w + b / n) / w), rel=1e-12)
    assert gelman_rubin(np.array([[1.0, 1.0], [2.0, 2.0]])) == math.inf


@pytest.mark.parametrize("bad", [{"init": "random"}, {"chains": 0}, {"burn_in": 10, "iterations": 10}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        McmcConfig(**bad)


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec(beta_precision=0.0)
    assert PriorSpec.for_outcome(BINARY).beta_precision == 0.02
    assert PriorSpec.for_outcome(CONTINUOUS).beta_precision == 0.001


def test_reproducible_and_summarised(rng, tmp_path):
    ds, _ = random_trial(rng, n=300, kind=BINARY, miss=0.1)
    cfg = McmcConfig(chains=2, iterations=600, burn_in=300, seed=9)
    a = gibbs_run(ds, cfg=cfg)
    b = gibbs_run(ds, cfg=cfg)
    assert np.array_equal(a.draws, b.draws)
    assert a.draws.shape == (2, 300, 4)
    write_samples(a, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "chain,draw,beta0,beta_c,beta_cz,pi" and len(lines) == 601
    est = bayes_estimate(ds, cfg=cfg)
    assert est.estimand == LOG_OR and est.ci_low < est.point < est.ci_high


def test_recovers_effect_continuous(rng):
    ds, _ = random_trial(rng, n=800, miss=0.1)
    est = bayes_estimate(ds, cfg=McmcConfig(chains=2, iterations=1500, burn_in=500, seed=1))
    assert est.ci_low < 2.0 < est.ci_high
    assert est.extra["rhat"] < 1.1
