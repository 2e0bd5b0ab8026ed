"""Evidential calibration: calibrated scores, Dirichlet evidence and the
ENLL / Dirichlet-KL / ECL losses with analytic gradients.

All batch functions take logits shaped ``(N, C)`` (a single ``(C,)`` vector
is also accepted where noted).  Gradients are returned for the logits and,
when the Dirichlet state was built from logits, for the raw smoothing
parameters ``theta``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numkernel import (
    digamma,
    inverse_softplus,
    lgamma,
    log_beta,
    softplus,
    stable_sigmoid,
    trigamma,
)

DEFAULT_LOGIT_CLAMP = 30.0
DEFAULT_SMOOTHING = 0.01


@dataclass
class CalibrationParams:
    """Per-class raw smoothing parameters and the concentration offset.

    ``s_j = softplus(theta_j)`` is the non-negative smoothing term.
    """

    theta: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1 or self.theta.size < 2:
            raise ValueError("theta must be a vector with at least two classes")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @classmethod
    def initial(cls, num_classes, kappa=1.0, smoothing=DEFAULT_SMOOTHING):
        theta = np.full(num_classes, inverse_softplus(smoothing))
        return cls(theta=theta, kappa=kappa)

    @classmethod
    def from_smoothing(cls, s, kappa=1.0):
        s = np.asarray(s, dtype=np.float64)
        theta = np.array([inverse_softplus(v) if v > 0 else -745.0 for v in s])
        return cls(theta=theta, kappa=kappa)

    @property
    def smoothing(self):
        return softplus(self.theta)

    @property
    def num_classes(self):
        return self.theta.size


@dataclass
class DirichletState:
    """Evidence, concentration and concentration sum (last axis = classes).

    ``dmu_dz`` and ``ds_dtheta`` carry the local Jacobians needed to push
    gradients from the concentration back to the logits and ``theta``.  They
    are ``None`` for states built directly from concentrations.
    """

    evidence: np.ndarray
    mu: np.ndarray
    s_total: np.ndarray
    kappa: float = 1.0
    dmu_dz: Optional[np.ndarray] = None
    ds_dtheta: Optional[np.ndarray] = None
    clamped: int = 0

    @classmethod
    def from_concentration(cls, mu, kappa=1.0):
        mu = np.asarray(mu, dtype=np.float64)
        if np.any(mu <= 0):
            raise ValueError("concentrations must be positive")
        return cls(evidence=mu - kappa, mu=mu, s_total=mu.sum(axis=-1), kappa=kappa)

    @property
    def num_classes(self):
        return self.mu.shape[-1]


@dataclass
class LossWithGrad:
    value: float
    grad_logits: Optional[np.ndarray] = None
    grad_theta: Optional[np.ndarray] = None
    grad_mu: Optional[np.ndarray] = None

    def __add__(self, other):
        return LossWithGrad(
            self.value + other.value,
            _add(self.grad_logits, other.grad_logits),
            _add(self.grad_theta, other.grad_theta),
            _add(self.grad_mu, other.grad_mu),
        )

    def scaled(self, c):
        return LossWithGrad(
            c * self.value,
            None if self.grad_logits is None else c * self.grad_logits,
            None if self.grad_theta is None else c * self.grad_theta,
            None if self.grad_mu is None else c * self.grad_mu,
        )


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def calibrated_probability(z, params):
    """Per-class calibrated score ``(e^{z_j} + s_j) / sum_k (e^{z_k} + s_j)``.

    When ``s`` differs across classes the outputs need not sum to one; this
    is the literal score, not a normalised distribution.
    """
    z = np.asarray(z, dtype=np.float64)
    s = params.smoothing
    C = z.shape[-1]
    if C < 2:
        raise ValueError("need at least two classes")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s_shift = s * np.exp(-m)
    return (e + s_shift) / (e.sum(axis=-1, keepdims=True) + C * s_shift)


def evidence_from_logits(z, params, clamp=DEFAULT_LOGIT_CLAMP):
    """Exponential evidence fused with the smoothing term.

    ``evidence = exp(clip(z)) + s``, ``mu = evidence + kappa``.  Logits
    outside ``[-clamp, clamp]`` are clipped; their gradient is zero and the
    number of clipped entries is stored in ``state.clamped``.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    if z.shape[-1] != params.num_classes:
        raise ValueError(
            f"logits have {z.shape[-1]} classes, params have {params.num_classes}"
        )
    inside = np.abs(z) <= clamp
    ez = np.exp(np.clip(z, -clamp, clamp))
    s = params.smoothing
    evidence = ez + s
    mu = evidence + params.kappa
    return DirichletState(
        evidence=evidence,
        mu=mu,
        s_total=mu.sum(axis=-1),
        kappa=params.kappa,
        dmu_dz=np.where(inside, ez, 0.0),
        ds_dtheta=stable_sigmoid(params.theta),
        clamped=int(np.count_nonzero(~inside)),
    )


def dirichlet_mean(state):
    return state.mu / np.expand_dims(state.s_total, -1)


def _batched(state):
    mu = np.atleast_2d(state.mu)
    return mu, mu.sum(axis=1)


def _finish(state, value, grad_mu):
    """Chain ``d loss / d mu`` back through the evidence map."""
    out = LossWithGrad(value=float(value), grad_mu=grad_mu.reshape(state.mu.shape))
    if state.dmu_dz is not None:
        out.grad_logits = (grad_mu * np.atleast_2d(state.dmu_dz)).reshape(state.mu.shape)
        out.grad_theta = grad_mu.sum(axis=0) * state.ds_dtheta
    return out


def enll_loss(state, labels):
    """Expected negative log-likelihood ``mean_i [psi(S_i) - psi(mu_{i,y_i})]``."""
    mu, S = _batched(state)
    labels = np.atleast_1d(np.asarray(labels))
    N, C = mu.shape
    if labels.shape != (N,):
        raise ValueError("labels must have one entry per sample")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError("label out of range")
    rows = np.arange(N)
    mu_y = mu[rows, labels]
    value = np.mean(digamma(S) - digamma(mu_y))
    grad = np.repeat(np.asarray(trigamma(S)).reshape(N, 1), C, axis=1)
    grad[rows, labels] -= trigamma(mu_y)
    return _finish(state, value, grad / N)


def kl_dirichlet_uniform_per_sample(state):
    """KL(Dir(mu_i) || Dir(1)) for every sample, without any normalisation."""
    mu, S = _batched(state)
    C = mu.shape[1]
    log_b1 = -lgamma(float(C))  # log B(1,...,1) = C*lgamma(1) - lgamma(C)
    dg = np.asarray(digamma(mu)) - np.asarray(digamma(S))[:, None]
    return log_b1 - np.atleast_1d(log_beta(mu, axis=1)) + ((mu - 1.0) * dg).sum(axis=1)


def kl_dirichlet_uniform(state, num_classes=None):
    """Dirichlet-to-uniform KL averaged with the ``1/(N C)`` factor."""
    mu, S = _batched(state)
    N, C = mu.shape
    if num_classes is not None and num_classes != C:
        raise ValueError("num_classes does not match the state")
    per = kl_dirichlet_uniform_per_sample(state)
    # d KL / d mu_k = (mu_k - 1) psi'(mu_k) - psi'(S) (S - C)
    grad = (mu - 1.0) * trigamma(mu) - (np.asarray(trigamma(S)) * (S - C))[:, None]
    return _finish(state, per.sum() / (N * C), grad / (N * C))


def ecl_loss(state, labels, lam=0.5):
    """ENLL plus ``lam`` times the Dirichlet KL regulariser."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    enll = enll_loss(state, labels)
    if lam == 0:
        return enll
    return enll + kl_dirichlet_uniform(state).scaled(lam)
