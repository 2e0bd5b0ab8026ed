"""Sample reliability scores for the refinement stage.

Two families of scores are computed per sample and epoch:

* CAM, on raw logits: ``alpha * margin - beta * top-k spread``;
* COSW, on normalised angular distances to the class prototypes, squashed
  into a certainty in ``[0, 1]``.

Both are accumulated over epochs with the normalised cosine-decay weights of
:func:`epoch_weights`.  Every scoring function accepts either a single
sample (vector input, scalar label) or a batch (``(N, C)`` input, ``(N,)``
labels).
"""

from dataclasses import dataclass, field

import numpy as np

from .numkernel import stable_sigmoid

__all__ = [
    "MarginParams",
    "CamRecord",
    "CoswRecord",
    "ScoreHistory",
    "angular_separation",
    "topk_spread",
    "instant_cam",
    "epoch_weights",
    "accumulate_cam",
    "angular_distance",
    "angular_distances",
    "hyperspherical_components",
    "cosw_score",
    "accumulate_cosw",
]


@dataclass(frozen=True)
class MarginParams:
    alpha: float = 100.0
    beta: float = 100.0
    k: int = 5
    total_epochs: int = 60

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")

    def k_for(self, num_classes):
        """``k`` clamped to the number of competitors."""
        return min(self.k, num_classes - 1)


def _as_batch(z, y):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if z.shape[1] < 2:
        raise ValueError("need at least two classes")
    if y.shape != (z.shape[0],) or np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("invalid target index")
    return z, y, single


def _ret(x, single):
    return float(x[0]) if single else x


def _check_k(k, C):
    if not 2 <= k <= C - 1:
        raise ValueError(f"k must lie in [2, {C - 1}], got {k}")


def _competitors_desc(z, y):
    """Non-target entries of each row, sorted in descending order."""
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, y] = -np.inf
    return -np.sort(-masked, axis=1)[:, :-1]


def angular_separation(z, y):
    """Target logit minus the strongest non-target logit."""
    z, y, single = _as_batch(z, y)
    comp = _competitors_desc(z, y)
    return _ret(z[np.arange(z.shape[0]), y] - comp[:, 0], single)


def topk_spread(z, y, k):
    """Strongest competitor minus the mean of the ``k`` strongest competitors."""
    z, y, single = _as_batch(z, y)
    _check_k(k, z.shape[1])
    comp = _competitors_desc(z, y)
    # mean of non-negative gaps: exactly 0 iff the top k are equal
    return _ret((comp[:, :1] - comp[:, :k]).mean(axis=1), single)


def instant_cam(z, y, params):
    """``alpha * angular_separation - beta * topk_spread``."""
    k = params.k_for(np.shape(z)[-1])
    return params.alpha * angular_separation(z, y) - params.beta * topk_spread(z, y, k)


def epoch_weights(t, T):
    """Normalised cosine-decay weights ``w_1..w_t`` for horizon ``T``."""
    if not (isinstance(t, (int, np.integer)) and isinstance(T, (int, np.integer))):
        raise TypeError("t and T must be integers")
    if not 1 <= t <= T:
        raise ValueError(f"need 1 <= t <= T, got t={t}, T={T}")
    j = np.arange(1, t + 1)
    logits = 1.0 + np.cos(np.pi * j / T)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def angular_distance(feature, prototype):
    """``(1 - cos(feature, prototype)) / 2``, in ``[0, 1]``."""
    f = np.asarray(feature, dtype=np.float64)
    p = np.asarray(prototype, dtype=np.float64)
    nf, np_ = np.linalg.norm(f), np.linalg.norm(p)
    if nf == 0 or np_ == 0:
        raise ValueError("zero-norm vector")
    c = np.clip(f @ p / (nf * np_), -1.0, 1.0)
    return float(0.5 * (1.0 - c))


def angular_distances(embeddings, prototypes, eps=1e-12):
    """Batch version: ``(N, d) x (C, d) -> (N, C)`` distances.

    Zero-norm embeddings (possible with a rectifier) get distance 0.5 to every
    prototype instead of raising.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    p = np.asarray(prototypes, dtype=np.float64)
    en = np.linalg.norm(e, axis=1, keepdims=True)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(pn == 0):
        raise ValueError("zero-norm prototype")
    cos = (e / np.maximum(en, eps)) @ (p / pn).T
    return 0.5 * (1.0 - np.clip(cos, -1.0, 1.0))


def hyperspherical_components(distances, y, k):
    """Distance-space margin and spread (smaller distance is better).

    ``delta_h = d_y - min_{q != y} d_q`` and
    ``lambda_h = min_{q != y} d_q - mean(k smallest non-target d)``; the
    latter is never positive.
    """
    d, y, single = _as_batch(distances, y)
    _check_k(k, d.shape[1])
    # ascending competitors = descending on the negated distances
    comp = -_competitors_desc(-d, y)
    delta_h = d[np.arange(d.shape[0]), y] - comp[:, 0]
    lambda_h = (comp[:, :1] - comp[:, :k]).mean(axis=1)
    if single:
        return float(delta_h[0]), float(lambda_h[0])
    return delta_h, lambda_h


def cosw_score(delta_h, lambda_h, params):
    """Certainty ``(sigmoid(-alpha*delta_h) + exp(beta*lambda_h)) / 2``."""
    lambda_h = np.asarray(lambda_h, dtype=np.float64)
    if np.any(lambda_h > 1e-12):
        raise ValueError("lambda_h must be <= 0")
    delta_h = np.asarray(delta_h, dtype=np.float64)
    s = 0.5 * (stable_sigmoid(-params.alpha * delta_h) + np.exp(params.beta * np.minimum(lambda_h, 0.0)))
    return float(s) if np.ndim(s) == 0 else s


@dataclass
class CamRecord:
    sample_id: int
    per_epoch_scores: list = field(default_factory=list)
    accumulated: float = 0.0

    def add(self, epoch, score):
        if self.per_epoch_scores and epoch <= self.per_epoch_scores[-1][0]:
            raise ValueError("epochs must be strictly increasing")
        self.per_epoch_scores.append((epoch, float(score)))


@dataclass
class CoswRecord(CamRecord):
    def add(self, epoch, score):
        if not 0.0 <= score <= 1.0:
            raise ValueError("certainty must lie in [0, 1]")
        super().add(epoch, score)


def _scores_through(record, t):
    by_epoch = dict(record.per_epoch_scores)
    missing = [j for j in range(1, t + 1) if j not in by_epoch]
    if missing:
        raise ValueError(f"sample {record.sample_id}: missing epochs {missing}")
    return np.array([by_epoch[j] for j in range(1, t + 1)])


def accumulate_cam(record, t, T):
    """Cosine-decay weighted sum of the instantaneous scores of epochs 1..t."""
    record.accumulated = float(epoch_weights(t, T) @ _scores_through(record, t))
    return record.accumulated


def accumulate_cosw(record, t, T):
    acc = float(epoch_weights(t, T) @ _scores_through(record, t))
    record.accumulated = min(max(acc, 0.0), 1.0)
    return record.accumulated


class ScoreHistory:
    """Dense per-epoch score table for all samples (epochs x samples).

    This is the vectorised counterpart of a list of :class:`CamRecord`; row
    ``j - 1`` holds the scores of epoch ``j``.
    """

    def __init__(self, num_samples, total_epochs):
        self.num_samples = num_samples
        self.total_epochs = total_epochs
        self.scores = np.full((total_epochs, num_samples), np.nan)
        self.epochs_filled = 0

    def record(self, epoch, scores):
        if epoch != self.epochs_filled + 1:
            raise ValueError(f"expected epoch {self.epochs_filled + 1}, got {epoch}")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (self.num_samples,):
            raise ValueError("one score per sample required")
        self.scores[epoch - 1] = scores
        self.epochs_filled = epoch

    def accumulated(self, t=None):
        t = self.epochs_filled if t is None else t
        if t > self.epochs_filled:
            raise ValueError(f"scores only available through epoch {self.epochs_filled}")
        return epoch_weights(t, self.total_epochs) @ self.scores[:t]

    def copy(self):
        other = ScoreHistory(self.num_samples, self.total_epochs)
        other.scores = self.scores.copy()
        other.epochs_filled = self.epochs_filled
        return other

    def record_for(self, sample_id, cls=CamRecord):
        rec = cls(sample_id)
        for j in range(self.epochs_filled):
            rec.per_epoch_scores.append((j + 1, float(self.scores[j, sample_id])))
        return rec


SCORE_FIELDS = ("delta", "lambda", "instant_cam", "delta_h", "lambda_h", "cosw")


def score_samples(embeddings, logits, prototypes, labels, params):
    """All per-sample scores for one epoch, keyed by :data:`SCORE_FIELDS`."""
    C = np.shape(logits)[-1]
    k = params.k_for(C)
    delta = angular_separation(logits, labels)
    lam = topk_spread(logits, labels, k)
    d = angular_distances(embeddings, prototypes)
    delta_h, lambda_h = hyperspherical_components(d, labels, k)
    return {
        "delta": delta,
        "lambda": lam,
        "instant_cam": params.alpha * delta - params.beta * lam,
        "delta_h": delta_h,
        "lambda_h": lambda_h,
        "cosw": cosw_score(delta_h, lambda_h, params),
    }


class ScoreBook:
    """CAM and COSW histories of one network over the whole training set."""

    def __init__(self, num_samples, total_epochs):
        self.cam = ScoreHistory(num_samples, total_epochs)
        self.cosw = ScoreHistory(num_samples, total_epochs)
        self.last = None

    @property
    def epochs_filled(self):
        return self.cam.epochs_filled

    def record(self, epoch, scores):
        self.cam.record(epoch, scores["instant_cam"])
        self.cosw.record(epoch, scores["cosw"])
        self.last = scores

    def certainty(self, t=None):
        return np.clip(self.cosw.accumulated(t), 0.0, 1.0)

    def copy(self):
        other = ScoreBook.__new__(ScoreBook)
        other.cam = self.cam.copy()
        other.cosw = self.cosw.copy()
        other.last = self.last
        return other
