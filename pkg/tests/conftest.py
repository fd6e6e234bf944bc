import numpy as np
import pytest

from cacemi.data import BINARY, CONTINUOUS, Dataset


def make_dataset(z, d, y, kind=CONTINUOUS, x=None, names=(), c=None):
    n = len(z)
    if x is None:
        x = np.empty((n, 0))
    return Dataset(ids=np.arange(1, n + 1), z=z, d=d, y=y, x=x, covariate_names=names,
                   outcome_kind=kind, c=c)


def random_trial(rng, n=400, kind=CONTINUOUS, pi=0.7, b=(0.0, 1.0, 2.0), sigma=1.0, miss=0.0,
                 with_x=False):
    """Draw from the two-class mixture model itself (no confounding)."""
    z = (rng.random(n) < 0.5).astype(int)
    c = (rng.random(n) < pi).astype(int)
    d = c * z
    x = rng.standard_normal((n, 1)) if with_x else np.empty((n, 0))
    eta = b[0] + b[1] * c + b[2] * c * z + (0.5 * x[:, 0] if with_x else 0.0)
    if kind == CONTINUOUS:
        y = eta + sigma * rng.standard_normal(n)
    else:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    if miss:
        y[rng.random(n) < miss] = np.nan
    names = ("x",) if with_x else ()
    return make_dataset(z, d, y, kind, x, names), c


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def wald_fixture():
    # (z, d, y): (1,1,2), (1,0,0), (0,0,0), (0,0,0)
    return make_dataset([1, 1, 0, 0], [1, 0, 0, 0], [2.0, 0.0, 0.0, 0.0])


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


__all__ = ["make_dataset", "random_trial", "BINARY", "CONTINUOUS", "ACCEPTANCE_LINES"]
