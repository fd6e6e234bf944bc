"""Hot-loop kernels with a compiled (Cython) backend and a numpy fallback.

The compiled module is used when it imports cleanly. Set
``CACEMI_BACKEND=python`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("CACEMI_BACKEND", "").lower() != "python":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def crossprod(X, w, y):
    return _impl.crossprod(_f64(X), _f64(w), _f64(y))


def logistic_loglik(X, y, w, beta):
    return float(_impl.logistic_loglik(_f64(X), _f64(y), _f64(w), _f64(beta)))


def irls_logistic(X, y, w, start, max_iter=100, score_tol=1e-8, rel_tol=1e-10):
    return _impl.irls_logistic(_f64(X), _f64(y), _f64(w), _f64(start),
                               int(max_iter), float(score_tol), float(rel_tol))


def class_posterior(y, eta1, eta0, pi, sigma, binary):
    n = len(y)
    return _impl.class_posterior(_f64(y), _f64(eta1), _f64(eta0),
                                 _f64(np.broadcast_to(pi, (n,))), float(sigma), bool(binary))


def rejection_round(y, eta1, eta0, pi, sigma, binary, u):
    n = len(y)
    return _impl.rejection_round(_f64(y), _f64(eta1), _f64(eta0),
                                 _f64(np.broadcast_to(pi, (n,))), float(sigma), bool(binary),
                                 _f64(u))


def using(backend):
    """Return the kernel module for ``backend`` ('python' or 'cython')."""
    if backend == "python":
        return _fallback
    from . import _core

    return _core
