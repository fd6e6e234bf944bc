import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats
from scipy.special import expit

from cacemi.data import TrialRecord, derive_compliance
from cacemi.errors import SEFailureError
from cacemi.glm import fit_linear, fit_logistic
from cacemi.mixture import (MixtureModelSpec, MixtureParams, class_posterior, class_posterior_probs,
                            complete_data_fit, design, em_fit, observed_loglik, outcome_density)

from conftest import BINARY, CONTINUOUS, make_dataset, random_trial

IDENT = MixtureModelSpec("identity")
LOGIT = MixtureModelSpec("logit")


def test_outcome_density_examples():
    th = MixtureParams(0.0, 0.0, 0.0, pi=0.5, sigma=1.0)
    assert outcome_density(0.0, 1, 0, (), th, IDENT) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-12)
    thb = MixtureParams(0.0, 0.0, 0.0, pi=0.5)
    assert outcome_density(1.0, 0, 0, (), thb, LOGIT) == pytest.approx(0.5)
    thb = MixtureParams(0.0, 0.0, 2.0, pi=0.5)
    assert outcome_density(1.0, 1, 1, (), thb, LOGIT) == pytest.approx(expit(2.0), rel=1e-12)
    assert outcome_density(1.0, 1, 1, (), thb, LOGIT) == pytest.approx(0.88080, abs=1e-5)


def test_outcome_density_with_covariates():
    spec = MixtureModelSpec("identity", ("x",))
    th = MixtureParams(0.5, 1.0, 2.0, (0.3,), pi=0.4, sigma=2.0)
    got = outcome_density(1.7, 1, 1, [2.0], th, spec)
    assert got == pytest.approx(stats.norm.pdf(1.7, 0.5 + 1 + 2 + 0.6, 2.0), rel=1e-12)


def _rec(y, z=0, d=0):
    return TrialRecord(1, z, d, y)


def test_class_posterior_examples():
    th = MixtureParams(0.0, 2.0, 0.0, pi=0.5, sigma=1.0)
    assert class_posterior(_rec(1.0), th, IDENT) == pytest.approx(0.5, abs=1e-15)
    f1, f0 = stats.norm.pdf(0.3, 2, 1), stats.norm.pdf(0.3, 0, 1)
    assert class_posterior(_rec(0.3), th, IDENT) == pytest.approx(0.5 * f1 / (0.5 * f1 + 0.5 * f0), rel=1e-12)
    flat = MixtureParams(0.0, 0.0, 1.0, pi=0.37, sigma=1.0)
    for y in (-3.0, 0.0, 5.0):
        assert class_posterior(_rec(y), flat, IDENT) == pytest.approx(0.37, abs=1e-14)
    assert class_posterior(_rec(None), th, IDENT) == 0.5
    assert class_posterior(_rec(4.0, z=1, d=1), th, IDENT) == 1.0
    assert class_posterior(_rec(4.0, z=1, d=0), th, IDENT) == 0.0


def test_observed_loglik_examples():
    assert observed_loglik(make_dataset([], [], []), MixtureParams(0, 0, 0, pi=0.5, sigma=1.0), IDENT) == 0.0
    ds = derive_compliance(make_dataset([1, 0], [1, 0], [0.0, np.nan]))
    th = MixtureParams(0.0, 0.0, 0.0, pi=0.5, sigma=1.0)
    # the z=0 record has no outcome so it adds nothing
    assert observed_loglik(ds, th, IDENT) == pytest.approx(-0.69315 - 0.91894, abs=1e-5)


def _brute_loglik(ds, th, spec):
    """Enumerate every latent-class configuration."""
    latent = [i for i in range(ds.n) if ds.z[i] == 0]
    total = 0.0
    for combo in itertools.product((0, 1), repeat=len(latent)):
        c = np.where(ds.z == 1, ds.d, 0).astype(float)
        c[latent] = combo
        lik = 1.0
        for i in range(ds.n):
            lik *= th.pi if c[i] == 1 else 1 - th.pi
            if not math.isnan(ds.y[i]):
                lik *= outcome_density(ds.y[i], c[i], ds.z[i], ds.x[i], th, spec)
        total += lik
    return math.log(total)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_observed_loglik_matches_enumeration(seed, binary):
    rng = np.random.default_rng(seed)
    z = np.array([1, 0, 1, 0, 0])
    d = z * (rng.random(5) < 0.6)
    if binary:
        y = (rng.random(5) < 0.5).astype(float)
    else:
        y = rng.normal(0, 2, 5)
    y[rng.random(5) < 0.2] = np.nan
    x = rng.standard_normal((5, 1))
    ds = make_dataset(z, d, y, BINARY if binary else CONTINUOUS, x, ("x",))
    spec = MixtureModelSpec("logit" if binary else "identity", ("x",))
    th = MixtureParams(*rng.normal(0, 1, 3), (rng.normal(),), pi=rng.uniform(0.1, 0.9),
                       sigma=None if binary else rng.uniform(0.5, 2))
    assert observed_loglik(ds, th, spec) == pytest.approx(_brute_loglik(ds, th, spec), abs=1e-12)


def _all_known(rng, kind, n=300):
    ds, c = random_trial(rng, n=n, kind=kind, with_x=True)
    return ds.replace(c=c.astype(float)), c


@pytest.mark.parametrize("kind", [CONTINUOUS, BINARY])
def test_em_equals_glm_on_complete_classes(rng, kind):
    ds, c = _all_known(rng, kind)
    spec = MixtureModelSpec.for_dataset(ds, ("x",))
    th, fit = em_fit(ds, spec)
    X = design(c, ds.z, ds.x)
    ref = fit_logistic(X, ds.y) if kind == BINARY else fit_linear(X, ds.y)
    np.testing.assert_allclose(th.beta, ref.coef, atol=1e-8)
    assert th.pi == pytest.approx(c.mean(), abs=1e-12)
    p = X.shape[1]
    ref_v = ref.vcov if kind == BINARY else ref.sigma_ml**2 * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(fit.vcov[:p, :p], ref_v, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("kind", [CONTINUOUS, BINARY])
def test_em_monotone_and_self_consistent(rng, kind):
    for _ in range(5):
        ds, _ = random_trial(rng, n=300, kind=kind, miss=0.1)
        spec = MixtureModelSpec.for_dataset(ds)
        th, fit = em_fit(ds, spec, compute_se=False)
        assert np.all(np.diff(fit.trace) >= -1e-10)
        assert fit.converged
        post = class_posterior_probs(derive_compliance(ds), th, spec)
        assert post.mean() == pytest.approx(th.pi, abs=1e-6)


def test_em_matches_direct_maximisation(rng):
    ds, _ = random_trial(rng, n=400)
    spec = IDENT
    th, fit = em_fit(ds, spec, tol=1e-12, max_iter=5000)

    def nll(v):
        return -observed_loglik(ds, MixtureParams.from_unconstrained(v, spec), spec)

    ref = optimize.minimize(nll, th.unconstrained(spec) + 0.05, method="BFGS", options={"gtol": 1e-8}).x
    np.testing.assert_allclose(th.unconstrained(spec), ref, atol=1e-4)
    assert fit.loglik >= -nll(ref) - 1e-8


def test_pi_when_components_identical(rng):
    n = 2000
    z = (rng.random(n) < 0.5).astype(int)
    c = (rng.random(n) < 0.6).astype(int)
    y = rng.standard_normal(n) + 1.0 * c * z
    ds = make_dataset(z, c * z, y)
    th, _ = em_fit(ds, IDENT, compute_se=False, tol=1e-13, max_iter=5000)
    # beta_c near 0 makes the control arm uninformative about class
    z1 = c[z == 1].mean()
    assert abs(th.beta_c) < 0.2
    assert th.pi == pytest.approx(z1, abs=0.02)


def test_translation_equivariance(rng):
    ds, _ = random_trial(rng, n=400)
    a, _ = em_fit(ds, IDENT, compute_se=False, tol=1e-12)
    b, _ = em_fit(ds.replace(y=ds.y + 3.0), IDENT, compute_se=False, tol=1e-12)
    assert b.beta0 == pytest.approx(a.beta0 + 3.0, abs=1e-6)
    for name in ("beta_c", "beta_cz", "pi", "sigma"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), abs=1e-6)


def test_se_failure_keeps_estimate(monkeypatch, rng):
    ds, _ = random_trial(rng, n=200)
    import cacemi.mixture as mx

    monkeypatch.setattr(mx, "numeric_hessian", lambda f, v: np.eye(len(v)))
    with pytest.raises(SEFailureError) as info:
        em_fit(ds, IDENT)
    th, fit = info.value.estimate
    assert isinstance(th, MixtureParams) and fit.converged


def test_complete_data_fit_blocks(rng):
    ds, c = _all_known(rng, CONTINUOUS, 500)
    th, v, fit = complete_data_fit(c, ds.y, ds.z, ds.x, MixtureModelSpec("identity", ("x",)))
    assert v[4, 4] == pytest.approx(1 / (2 * 500))
    assert v[5, 5] == pytest.approx(1 / (500 * th.pi * (1 - th.pi)))
    assert np.all(v[:4, 4:] == 0)


def test_spec_link_must_match(rng):
    ds, _ = random_trial(rng, kind=BINARY)
    with pytest.raises(Exception, match="link"):
        em_fit(ds, IDENT)
