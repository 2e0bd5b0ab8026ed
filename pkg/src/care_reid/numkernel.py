"""Special functions and stable probability primitives.

The gamma-family functions are thin, vectorised wrappers over
:mod:`scipy.special` that add domain checking (``x <= 0`` raises instead of
returning ``nan``/``inf``).  Everything works on scalars or arrays and
always computes in float64.
"""

import numpy as np
from scipy import special as _sp

__all__ = [
    "lgamma",
    "digamma",
    "trigamma",
    "log_beta",
    "stable_softmax",
    "stable_log_softmax",
    "stable_sigmoid",
    "softplus",
    "inverse_softplus",
]


def _positive(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: non-finite argument")
    if np.any(x <= 0):
        raise ValueError(f"{name}: argument must be > 0")
    return x


def _out(r):
    return float(r) if np.ndim(r) == 0 else r


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    return _out(_sp.gammaln(_positive(x, "lgamma")))


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    return _out(_sp.digamma(_positive(x, "digamma")))


def trigamma(x):
    """psi'(x) for x > 0; strictly positive on the whole domain."""
    return _out(_sp.polygamma(1, _positive(x, "trigamma")))


def log_beta(mu, axis=-1):
    """Log of the multivariate Beta function along ``axis``.

    ``log B(mu) = sum_k lgamma(mu_k) - lgamma(sum_k mu_k)``
    """
    mu = _positive(mu, "log_beta")
    if mu.ndim == 0 or mu.shape[axis] < 2:
        raise ValueError("log_beta: need at least two entries")
    r = _sp.gammaln(mu).sum(axis=axis) - _sp.gammaln(mu.sum(axis=axis))
    return _out(r)


def stable_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def stable_log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive number never overflows
    e = np.exp(-np.abs(x))
    r = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _out(r)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return _out(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))


def inverse_softplus(y):
    """theta such that softplus(theta) == y, for y > 0."""
    y = _positive(y, "inverse_softplus")
    return _out(np.where(y > 30.0, y, np.log(np.expm1(y))))
