"""End-to-end runs: data, noise, training (CARE / stage-1 only / CE baseline), evaluation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .cotrain import PeerPair, refinement_epoch
from .epr import ScoreBook
from .metrics import cmc_map, detection_auc, l2_normalize, report_row, vc_va
from .model import PeerModel, lr_at
from .training import score_model, train_epoch

log = logging.getLogger(__name__)

METHODS = ("care", "s1", "baseline")


@dataclass
class RunResult:
    method: str
    seed: int
    rank1: float
    rank5: float
    rank10: float
    map: float
    v_c: float
    v_a: object
    auc: object
    epochs: int = 0
    models: list = field(repr=False, default_factory=list)
    books: list = field(repr=False, default_factory=list)
    logs: list = field(repr=False, default_factory=list)
    dataset: object = field(repr=False, default=None)

    def row(self, stage=None):
        return report_row(stage or self.method, self.epochs, self, self.v_c, self.v_a,
                          self.auc, self.seed)


def clean_dataset(cfg, seed):
    return synthdata.generate(cfg.c_train, cfg.c_test, cfg.samples_per_id, cfg.d_in,
                              cfg.intra_spread, seed, identity_dim=cfg.identity_dim or None)


def reference_model(cfg, ds, seed):
    """Network trained on clean labels, used to pick patterned-noise targets."""
    ref = PeerModel(cfg.d_in, cfg.d_emb, cfg.c_train, seed=seed, kappa=cfg.kappa)
    rng = np.random.default_rng((seed, 7))
    for epoch in range(1, cfg.stage1_epochs + 1):
        train_epoch(ref, ds.train.features, ds.train.true_label, lr_at(epoch, cfg.schedule),
                    rng, cfg.batch_size, cfg.momentum, "ecl", cfg.lam, epoch)
    return ref


def apply_noise(cfg, ds, seed):
    """Relabel ``ds`` according to ``cfg.noise_type`` and ``cfg.noise_rate``."""
    if cfg.noise_type == "random":
        return synthdata.inject_random_noise(ds, cfg.noise_rate, seed)
    if cfg.noise_type == "patterned":
        return synthdata.inject_patterned_noise(ds, cfg.noise_rate, reference_model(cfg, ds, seed), seed)
    return ds


def make_dataset(cfg, seed):
    return apply_noise(cfg, clean_dataset(cfg, seed), seed)


def _auc(book, is_clean):
    if 0 < np.count_nonzero(is_clean) < is_clean.size:
        return detection_auc(book.certainty(), is_clean)
    return None


def embed(models, X):
    """Retrieval embedding: mean of the L2-normalised embeddings of ``models``."""
    return np.mean([l2_normalize(m.forward(X)[0]) for m in models], axis=0)


def evaluate(models, ds, books):
    q = embed(models, ds.query.features)
    g = embed(models, ds.gallery.features)
    rep = cmc_map(q, ds.query.true_label, g, ds.gallery.true_label)
    tr = ds.train
    v_c, v_a = vc_va(embed(models, tr.features), tr.true_label, tr.noisy_label)
    is_clean = ~tr.corrupted
    aucs = [a for a in (_auc(b, is_clean) for b in books) if a is not None]
    auc = float(np.mean(aucs)) if aucs else None
    return rep, v_c, v_a, auc


def run(cfg, seed, method="care", dataset=None, on_epoch=None):
    """Train one method on one seed and evaluate it on the test split.

    ``on_epoch(stage, epoch, models, books, logs)`` is called after every
    epoch, e.g. to dump scores.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    ds = dataset if dataset is not None else make_dataset(cfg, seed)
    X, y = ds.train.features, ds.train.noisy_label
    is_clean = ~ds.train.corrupted
    T = cfg.total_epochs
    margin = cfg.margin
    schedule = cfg.schedule

    model = PeerModel(cfg.d_in, cfg.d_emb, cfg.c_train, seed=seed, kappa=cfg.kappa)
    book = ScoreBook(X.shape[0], T)
    rng = np.random.default_rng((seed, 1))
    logs = []

    stage1_epochs = cfg.stage1_epochs if method == "care" else T
    loss = "ce" if method == "baseline" else "ecl"
    for epoch in range(1, stage1_epochs + 1):
        value, clamped = train_epoch(model, X, y, lr_at(epoch, schedule), rng, cfg.batch_size,
                                     cfg.momentum, loss, cfg.lam, epoch)
        book.record(epoch, score_model(model, X, y, margin))
        entry = {"epoch": epoch, "net": 1, "stage": 1, loss: value,
                 "detection_auc": _auc(book, is_clean)}
        if clamped:
            entry["clamped"] = clamped
        logs.append(entry)
        if on_epoch:
            on_epoch("stage1", epoch, [model], [book], [entry])

    models, books = [model], [book]
    if method == "care" and cfg.stage2_epochs:
        pair = PeerPair.from_stage1(model, book)
        rate, threshold = (cfg.noise_rate, None) if cfg.partition == "quantile" else (None, cfg.threshold)
        for epoch in range(cfg.stage1_epochs + 1, T + 1):
            entries = refinement_epoch(
                pair, X, y, epoch, lr_at(epoch, schedule), margin,
                batch_size=cfg.batch_size, momentum=cfg.momentum, gamma=cfg.gamma,
                rate=rate, threshold=threshold, seed=seed, is_clean=is_clean,
            )
            for e in entries:
                e["stage"] = 2
            logs.extend(entries)
            if on_epoch:
                on_epoch("stage2", epoch, list(pair.nets()), list(pair.books()), entries)
        models, books = list(pair.nets()), list(pair.books())

    rep, v_c, v_a, auc = evaluate(models, ds, books)
    log.info("%s seed=%d rank1=%.4f mAP=%.4f auc=%s", method, seed, rep.rank1, rep.map, auc)
    return RunResult(method, seed, rep.rank1, rep.rank5, rep.rank10, rep.map, v_c, v_a, auc, T,
                     models, books, logs, ds)
