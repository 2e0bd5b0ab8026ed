"""Peer-network co-training for the refinement stage.

Each network is supervised by a per-sample weight vector ``R`` over classes:
samples judged clean keep their given label, weighted by the network's own
accumulated COSW certainty; samples judged noisy take the peer network's
predicted label, weighted by the peer's confidence in it.  The objective is
the weighted cross-entropy plus ``gamma`` times the weighted KL alignment
term, both written for the two networks jointly.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .epr import ScoreBook
from .metrics import detection_auc
from .model import NonFiniteError, PeerModel
from .numkernel import stable_softmax
from .pec import LossWithGrad
from .training import minibatches, score_model

PROB_FLOOR = 1e-12

CAM_CERTAINTY = "cam_certainty"
PEER_PROBABILITY = "peer_probability"


@dataclass(frozen=True)
class PartitionDecision:
    sample_id: int
    is_clean: bool
    weight_source: str

    def __post_init__(self):
        expected = CAM_CERTAINTY if self.is_clean else PEER_PROBABILITY
        if self.weight_source != expected:
            raise ValueError("weight_source must be cam_certainty iff the sample is clean")


def partition_mask(certainty, rate=None, threshold=None):
    """Boolean clean mask from accumulated certainties.

    Exactly one of ``rate`` (quantile strategy: the top ``ceil((1-rate) N)``
    samples are clean, ties broken by ascending sample index) or
    ``threshold`` (clean iff certainty >= threshold) must be given.
    """
    c = np.asarray(certainty, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("need a non-empty vector of certainties")
    if (rate is None) == (threshold is None):
        raise ValueError("give exactly one of rate or threshold")
    if threshold is not None:
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return c >= threshold
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    n_clean = int(np.ceil((1.0 - rate) * c.size - 1e-9))
    order = np.lexsort((np.arange(c.size), -c))
    mask = np.zeros(c.size, dtype=bool)
    mask[order[:n_clean]] = True
    return mask


def partition_clean_noisy(certainty, rate=None, threshold=None, sample_ids=None):
    mask = partition_mask(certainty, rate=rate, threshold=threshold)
    ids = range(mask.size) if sample_ids is None else sample_ids
    return [
        PartitionDecision(int(i), bool(m), CAM_CERTAINTY if m else PEER_PROBABILITY)
        for i, m in zip(ids, mask)
    ]


def peer_label(p):
    """Arg-max label (lowest index on ties) and its probability.

    Works on one probability vector or on an ``(N, C)`` batch.
    """
    p = np.asarray(p, dtype=np.float64)
    label = np.argmax(p, axis=-1)
    conf = np.take_along_axis(p, np.expand_dims(label, -1), axis=-1)[..., 0]
    if p.ndim == 1:
        return int(label), float(conf)
    return label, conf


def weight_R(decision, given_label, peer, cam_certainty, num_classes):
    """Dense weight vector for one sample."""
    if not 0.0 <= cam_certainty <= 1.0:
        raise ValueError("certainty must lie in [0, 1]")
    w = np.zeros(num_classes)
    if decision.is_clean:
        w[given_label] = cam_certainty
    else:
        label, conf = peer
        w[label] = conf
    return w


def weight_matrix(clean, given_labels, certainty, peer_probs):
    """Vectorised ``weight_R`` over a whole set of samples.

    ``clean``, ``given_labels`` and ``certainty`` belong to the network being
    trained; ``peer_probs`` are the other network's predictions.
    """
    clean = np.asarray(clean, dtype=bool)
    N, C = peer_probs.shape
    label, conf = peer_label(peer_probs)
    target = np.where(clean, given_labels, label)
    weight = np.where(clean, certainty, conf)
    R = np.zeros((N, C))
    R[np.arange(N), target] = weight
    return R


def _log_floor(p):
    keep = p > PROB_FLOOR
    return np.log(np.where(keep, p, PROB_FLOOR)), keep


def _grad_weighted_log(a, p, keep):
    """d/dz of sum_j a_j log(max(p_j, floor)) for p = softmax(z), per row."""
    ak = a * keep
    return ak - p * ak.sum(axis=1, keepdims=True)


def _grad_p_dot(b, p):
    """d/dz of sum_j p_j b_j for p = softmax(z) and fixed b, per row."""
    return p * (b - (p * b).sum(axis=1, keepdims=True))


@dataclass
class PeerLoss:
    value: float
    grad_logits1: Optional[np.ndarray]
    grad_logits2: Optional[np.ndarray]

    def __add__(self, other):
        return PeerLoss(self.value + other.value,
                        self.grad_logits1 + other.grad_logits1,
                        self.grad_logits2 + other.grad_logits2)

    def scaled(self, c):
        return PeerLoss(c * self.value, c * self.grad_logits1, c * self.grad_logits2)

    def for_net(self, k):
        return LossWithGrad(self.value, self.grad_logits1 if k == 1 else self.grad_logits2)


def _check(z1, z2, R1, R2):
    z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
    R1, R2 = np.atleast_2d(R1), np.atleast_2d(R2)
    if not (z1.shape == z2.shape == R1.shape == R2.shape):
        raise ValueError(
            f"shape mismatch: {z1.shape}, {z2.shape}, {R1.shape}, {R2.shape}"
        )
    return z1, z2, R1, R2


def wce_loss(z1, z2, R1, R2):
    """Weighted cross-entropy of both networks against their weight targets.

    Takes the two networks' logits; probabilities are their softmax.
    """
    z1, z2, R1, R2 = _check(z1, z2, R1, R2)
    N = z1.shape[0]
    p1, p2 = stable_softmax(z1), stable_softmax(z2)
    l1, k1 = _log_floor(p1)
    l2, k2 = _log_floor(p2)
    value = -((R1 * l1).sum() + (R2 * l2).sum()) / N
    g1 = -_grad_weighted_log(R1, p1, k1) / N
    g2 = -_grad_weighted_log(R2, p2, k2) / N
    return PeerLoss(float(value), g1, g2)


def wkl_loss(z1, z2, R1, R2):
    """Weighted KL alignment, ``mean_i sum_j [(p2 - R1) log p1 + (p1 - R2) log p2]``."""
    z1, z2, R1, R2 = _check(z1, z2, R1, R2)
    N = z1.shape[0]
    p1, p2 = stable_softmax(z1), stable_softmax(z2)
    l1, k1 = _log_floor(p1)
    l2, k2 = _log_floor(p2)
    value = (((p2 - R1) * l1).sum() + ((p1 - R2) * l2).sum()) / N
    g1 = (_grad_weighted_log(p2 - R1, p1, k1) + _grad_p_dot(l2, p1)) / N
    g2 = (_grad_weighted_log(p1 - R2, p2, k2) + _grad_p_dot(l1, p2)) / N
    return PeerLoss(float(value), g1, g2)


def refinement_loss(z1, z2, R1, R2, gamma=1.0):
    """``WCE + gamma * WKL`` with gradients for both networks."""
    total = wce_loss(z1, z2, R1, R2)
    if gamma:
        total = total + wkl_loss(z1, z2, R1, R2).scaled(gamma)
    return total


@dataclass
class PeerPair:
    net1: PeerModel
    net2: PeerModel
    scores1: ScoreBook
    scores2: ScoreBook

    def __post_init__(self):
        a, b = self.net1, self.net2
        if (a.num_classes, a.d_emb, a.d_in) != (b.num_classes, b.d_emb, b.d_in):
            raise ValueError("peer networks must share their dimensions")
        if self.scores1.cosw.num_samples != self.scores2.cosw.num_samples:
            raise ValueError("score tables must cover the same samples")

    @classmethod
    def from_stage1(cls, model, book):
        """Both peers start from the calibrated network and its score history."""
        return cls(model.copy(), model.copy(), book.copy(), book.copy())

    def nets(self):
        return (self.net1, self.net2)

    def books(self):
        return (self.scores1, self.scores2)


def epoch_targets(pair, X, given_labels, rate=None, threshold=None):
    """Start-of-epoch logits, clean masks and weight matrices of both networks.

    Network ``k``'s clean set is selected by its peer's certainty table; its
    clean-branch weights are its own certainty and its noisy-branch targets
    are the peer's predictions.
    """
    frozen = [net.forward(X)[1] for net in pair.nets()]
    probs = [stable_softmax(z) for z in frozen]
    certainty = [b.certainty() for b in pair.books()]
    clean = [partition_mask(certainty[1 - k], rate=rate, threshold=threshold) for k in (0, 1)]
    R = [weight_matrix(clean[k], given_labels, certainty[k], probs[1 - k]) for k in (0, 1)]
    return frozen, clean, R


def refinement_epoch(pair, X, given_labels, epoch, lr, margin, *, batch_size=32,
                     momentum=0.9, gamma=1.0, rate=None, threshold=None, seed=0,
                     shuffle_offset=1, is_clean=None):
    """One co-training epoch over the whole training set, updating ``pair`` in place.

    Targets are fixed at the start of the epoch (:func:`epoch_targets`).
    The two networks are then updated one after the other, each against the
    peer's start-of-epoch logits, each in its own shuffled order
    (``seed`` and ``seed + shuffle_offset``).  Afterwards both networks are
    rescored on the whole training set.

    Returns one log dict per network.
    """
    nets, books = pair.nets(), pair.books()
    frozen, clean, R = epoch_targets(pair, X, given_labels, rate=rate, threshold=threshold)

    logs = []
    for k, net in enumerate(nets):
        rng = np.random.default_rng((seed + k * shuffle_offset, epoch))
        wce_sum = wkl_sum = 0.0
        for b, idx in enumerate(minibatches(X.shape[0], batch_size, rng)):
            live = net.forward(X[idx])[1]
            z1, z2 = (live, frozen[1][idx]) if k == 0 else (frozen[0][idx], live)
            wce = wce_loss(z1, z2, R[0][idx], R[1][idx])
            wkl = wkl_loss(z1, z2, R[0][idx], R[1][idx])
            total = wce + wkl.scaled(gamma)
            if not np.isfinite(total.value):
                raise NonFiniteError(f"non-finite refinement loss at epoch {epoch}",
                                     {"epoch": epoch, "net": k + 1, "batch": b})
            grad = total.grad_logits1 if k == 0 else total.grad_logits2
            net.backward_update(X[idx], grad, lr, momentum)
            wce_sum += wce.value * idx.size
            wkl_sum += wkl.value * idx.size
        logs.append({
            "epoch": epoch,
            "net": k + 1,
            "wce": wce_sum / X.shape[0],
            "wkl": wkl_sum / X.shape[0],
            "clean_fraction": float(clean[k].mean()),
        })

    for k, (net, book) in enumerate(zip(nets, books)):
        book.record(epoch, score_model(net, X, given_labels, margin))
        auc = None
        if is_clean is not None and 0 < np.count_nonzero(is_clean) < len(is_clean):
            auc = detection_auc(book.certainty(), is_clean)
        logs[k]["detection_auc"] = auc
    return logs
