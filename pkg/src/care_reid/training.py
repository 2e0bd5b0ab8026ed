"""Single-network epochs (calibration loss or plain cross-entropy) and scoring."""

import numpy as np

from .epr import score_samples
from .model import NonFiniteError
from .numkernel import stable_log_softmax, stable_softmax
from .pec import LossWithGrad, ecl_loss, evidence_from_logits


def minibatches(n, batch_size, rng):
    """Shuffled index batches covering ``range(n)`` once; the last may be short."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def cross_entropy(z, labels):
    """Mean softmax cross-entropy with its logit gradient."""
    z = np.atleast_2d(z)
    N = z.shape[0]
    rows = np.arange(N)
    value = -stable_log_softmax(z)[rows, labels].mean()
    g = stable_softmax(z)
    g[rows, labels] -= 1.0
    return LossWithGrad(float(value), g / N)


def _check_finite(loss, epoch, batch):
    if not np.isfinite(loss.value):
        raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {batch}",
                             {"epoch": epoch, "batch": batch, "value": loss.value})


def train_epoch(model, X, labels, lr, rng, batch_size=32, momentum=0.9, loss="ecl",
                lam=0.5, epoch=None):
    """One pass over ``X`` with the calibration loss (``"ecl"``) or ``"ce"``.

    Returns the sample-weighted mean loss and the number of clamped logits.
    """
    total, clamped = 0.0, 0
    for b, idx in enumerate(minibatches(X.shape[0], batch_size, rng)):
        xb, yb = X[idx], labels[idx]
        _, z = model.forward(xb)
        if loss == "ecl":
            state = evidence_from_logits(z, model.calibration())
            clamped += state.clamped
            lw = ecl_loss(state, yb, lam)
        elif loss == "ce":
            lw = cross_entropy(z, yb)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        _check_finite(lw, epoch, b)
        model.backward_update(xb, lw.grad_logits, lr, momentum, grad_theta=lw.grad_theta)
        total += lw.value * idx.size
    return total / X.shape[0], clamped


def score_model(model, X, labels, margin):
    emb, z = model.forward(X)
    return score_samples(emb, z, model.P, labels, margin)


def predict_proba(model, X):
    return stable_softmax(model.forward(X)[1])
