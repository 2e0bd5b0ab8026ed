"""Synthetic identity datasets and label-noise injection.

Each identity is a random unit-norm centre in ``d_in`` dimensions.  A sample
is its centre plus an isotropic Gaussian perturbation whose expected norm is
``intra_spread`` (per-coordinate std ``intra_spread / sqrt(d_in)``), projected
back to the unit sphere.  A quarter of every identity's samples are "hard"
and use three times the spread.

Train and test identities are disjoint; test identities are split per
identity into query and gallery halves.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

HARD_FRACTION = 0.25
HARD_FACTOR = 3.0
MAX_PER_ID = 30


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    sample_id: int
    features: tuple
    true_label: int
    noisy_label: int

    @property
    def corrupted(self):
        return self.noisy_label != self.true_label


@dataclass
class Split:
    """Column-oriented sample table."""

    sample_id: np.ndarray
    features: np.ndarray
    true_label: np.ndarray
    noisy_label: np.ndarray

    def __len__(self):
        return self.sample_id.size

    @property
    def corrupted(self):
        return self.noisy_label != self.true_label

    def samples(self):
        return [
            LabeledSample(int(i), tuple(f), int(t), int(n))
            for i, f, t, n in zip(self.sample_id, self.features, self.true_label, self.noisy_label)
        ]

    def with_noisy(self, noisy):
        return replace(self, noisy_label=np.asarray(noisy, dtype=np.int64))

    def equals(self, other):
        return (
            np.array_equal(self.sample_id, other.sample_id)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.true_label, other.true_label)
            and np.array_equal(self.noisy_label, other.noisy_label)
        )


@dataclass
class Dataset:
    train: Split
    query: Split
    gallery: Split
    meta: dict = field(default_factory=dict)

    @property
    def num_train_classes(self):
        return self.meta["c_train"]

    def equals(self, other):
        return (
            self.train.equals(other.train)
            and self.query.equals(other.query)
            and self.gallery.equals(other.gallery)
            and self.meta == other.meta
        )


def _identity_samples(rng, center, n, spread):
    d = center.size
    n_hard = int(round(HARD_FRACTION * n))
    scale = np.full(n, spread / math.sqrt(d))
    scale[:n_hard] *= HARD_FACTOR
    x = center + rng.standard_normal((n, d)) * scale[:, None]
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate(c_train=50, c_test=25, samples_per_id=20, d_in=32, intra_spread=0.15, seed=0,
             identity_dim=None):
    """Draw a dataset.

    ``identity_dim`` (default ``d_in``) restricts the identity centres to a
    random subspace of that dimension; the perturbation stays isotropic, so
    the remaining directions carry nuisance variation only.
    """
    identity_dim = d_in if identity_dim is None else identity_dim
    if not 2 <= identity_dim <= d_in:
        raise ValueError("identity_dim must lie in [2, d_in]")
    if c_train < 2 or c_test < 1:
        raise ValueError("need at least two train identities and one test identity")
    if not 2 <= samples_per_id <= MAX_PER_ID:
        raise ValueError(f"samples_per_id must lie in [2, {MAX_PER_ID}]")
    if intra_spread < 0 or d_in < 2:
        raise ValueError("invalid intra_spread or d_in")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((c_train + c_test, identity_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if identity_dim < d_in:
        basis = np.linalg.qr(rng.standard_normal((d_in, identity_dim)))[0]
        centers = centers @ basis.T
    feats = np.concatenate(
        [_identity_samples(rng, c, samples_per_id, intra_spread) for c in centers]
    )
    labels = np.repeat(np.arange(c_train + c_test), samples_per_id)

    n_train = c_train * samples_per_id
    train = Split(np.arange(n_train), feats[:n_train], labels[:n_train], labels[:n_train].copy())

    # within each test identity, alternate samples so hard ones land in both halves
    test_idx = np.arange(n_train, labels.size)
    pos = (test_idx - n_train) % samples_per_id
    q_idx, g_idx = test_idx[pos % 2 == 0], test_idx[pos % 2 == 1]
    query = Split(q_idx, feats[q_idx], labels[q_idx], labels[q_idx].copy())
    gallery = Split(g_idx, feats[g_idx], labels[g_idx], labels[g_idx].copy())
    meta = {
        "c_train": c_train,
        "c_test": c_test,
        "samples_per_id": samples_per_id,
        "d_in": d_in,
        "intra_spread": intra_spread,
        "identity_dim": identity_dim,
        "seed": seed,
        "noise_type": "none",
        "noise_rate": 0.0,
        "noise_seed": None,
    }
    return Dataset(train, query, gallery, meta)


def _pick(n, rate, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError("noise rate must lie in [0, 1)")
    count = int(math.floor(rate * n + 1e-9))
    return np.sort(rng.choice(n, size=count, replace=False))


def inject_random_noise(dataset, rate, seed=0):
    """Relabel exactly ``floor(rate * N)`` random train samples uniformly to a wrong class."""
    rng = np.random.default_rng(seed)
    tr = dataset.train
    C = dataset.num_train_classes
    chosen = _pick(len(tr), rate, rng)
    noisy = tr.true_label.copy()
    # uniform over the C-1 wrong classes: shift by 1..C-1 modulo C
    shift = rng.integers(1, C, size=chosen.size)
    noisy[chosen] = (tr.true_label[chosen] + shift) % C
    meta = dict(dataset.meta, noise_type="random", noise_rate=rate, noise_seed=seed)
    return Dataset(tr.with_noisy(noisy), dataset.query, dataset.gallery, meta)


def nearest_cross_identity(embeddings, true_label, eps=1e-12):
    """For every sample, index of the most similar sample of another identity.

    Cosine distance; ties resolved towards the smallest index.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), eps)
    sim = e @ e.T
    sim[true_label[:, None] == true_label[None, :]] = -np.inf
    # argmax returns the first maximal index
    return np.argmax(sim, axis=1)


def inject_patterned_noise(dataset, rate, reference_model, seed=0):
    """Relabel ``floor(rate * N)`` random train samples to the true label of
    their nearest other-identity neighbour in the reference model's embedding
    space."""
    rng = np.random.default_rng(seed)
    tr = dataset.train
    if np.unique(tr.true_label).size < 2:
        raise ValueError("patterned noise needs at least two identities")
    chosen = _pick(len(tr), rate, rng)
    emb, _ = reference_model.forward(tr.features)
    nn = nearest_cross_identity(emb, tr.true_label)
    noisy = tr.true_label.copy()
    noisy[chosen] = tr.true_label[nn[chosen]]
    meta = dict(dataset.meta, noise_type="patterned", noise_rate=rate, noise_seed=seed)
    return Dataset(tr.with_noisy(noisy), dataset.query, dataset.gallery, meta)


# -- persistence -----------------------------------------------------------

SPLITS = ("train", "query", "gallery")


def _write_split(split, path):
    d = split.features.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "true_label", "noisy_label"] + [f"f{j}" for j in range(d)])
        for i, t, n, x in zip(split.sample_id, split.true_label, split.noisy_label, split.features):
            w.writerow([int(i), int(t), int(n)] + [repr(float(v)) for v in x])


def _read_split(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if header[:3] != ["sample_id", "true_label", "noisy_label"] or len(header) < 4:
        raise DataFormatError(f"{path}:1: unexpected header {header[:4]}")
    d = len(header) - 3
    if header[3:] != [f"f{j}" for j in range(d)]:
        raise DataFormatError(f"{path}:1: feature columns must be f0..f{d - 1}")
    if len(rows) == 1:
        raise DataFormatError(f"{path}: no samples")
    ids, true, noisy, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            ids.append(int(row[0]))
            true.append(int(row[1]))
            noisy.append(int(row[2]))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer id or label") from None
        try:
            feats.append([float(v) for v in row[3:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return Split(np.array(ids, dtype=np.int64), np.array(feats, dtype=np.float64),
                 np.array(true, dtype=np.int64), np.array(noisy, dtype=np.int64))


def save(dataset, path):
    os.makedirs(path, exist_ok=True)
    for name in SPLITS:
        _write_split(getattr(dataset, name), os.path.join(path, f"{name}.csv"))
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(dataset.meta, f, indent=2, sort_keys=True)


def load(path):
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise DataFormatError(f"{meta_path}: missing")
    with open(meta_path) as f:
        meta = json.load(f)
    splits = {name: _read_split(os.path.join(path, f"{name}.csv")) for name in SPLITS}
    return Dataset(meta=meta, **splits)
