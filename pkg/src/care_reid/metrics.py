"""Retrieval metrics (CMC, mAP) and noise diagnostics (V_c, V_a, detection AUC)."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

REPORT_HEADER = ["stage", "epoch", "rank1", "rank5", "rank10", "map", "v_c", "v_a", "auc", "seed"]


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    average_precisions: np.ndarray = field(repr=False, default=None)
    cmc: np.ndarray = field(repr=False, default=None)


@dataclass
class NoiseDiagnostics:
    v_c: float
    v_a: Optional[float]
    detection_auc: Optional[float]


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def cosine_distance(a, b):
    return 1.0 - l2_normalize(a) @ l2_normalize(b).T


def cmc_map_from_distances(dist, query_ids, gallery_ids, topk=(1, 5, 10)):
    """CMC curve and mAP from a query x gallery distance matrix.

    Gallery items are ranked by ascending distance; equal distances keep
    gallery order.
    """
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    absent = ~np.isin(query_ids, gallery_ids)
    if absent.any():
        raise ValueError(f"query identities {np.unique(query_ids[absent])[:5]} absent from gallery")
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery_ids[order] == query_ids[:, None]
    first_hit = matches.argmax(axis=1)
    G = gallery_ids.size
    cmc = (first_hit[:, None] <= np.arange(G)[None, :]).mean(axis=0)

    hits = np.cumsum(matches, axis=1)
    precision = hits / np.arange(1, G + 1)
    ap = (precision * matches).sum(axis=1) / matches.sum(axis=1)

    ranks = [float(cmc[min(k, G) - 1]) for k in topk]
    return RetrievalReport(*ranks, map=float(ap.mean()), average_precisions=ap, cmc=cmc)


def cmc_map(query_emb, query_ids, gallery_emb, gallery_ids):
    """Rank-1/5/10 and mAP under cosine distance."""
    return cmc_map_from_distances(cosine_distance(query_emb, gallery_emb), query_ids, gallery_ids)


def vc_va(embeddings, true_labels, noisy_labels):
    """Compactness of correctly labelled samples and dispersion of mislabelled ones.

    ``v_c``: mean over identities of the mean squared distance of the
    correctly labelled samples to their identity centroid.  ``v_a``: mean
    squared distance of mislabelled samples to the centroid of their true
    identity, or ``None`` when nothing is mislabelled.  Centroids are taken
    over correctly labelled samples only.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    true_labels = np.asarray(true_labels)
    clean = true_labels == np.asarray(noisy_labels)
    centroids = {}
    per_class = []
    for c in np.unique(true_labels):
        members = e[clean & (true_labels == c)]
        if members.shape[0] == 0:
            continue
        centroids[c] = members.mean(axis=0)
        per_class.append(((members - centroids[c]) ** 2).sum(axis=1).mean())
    if not per_class:
        raise ValueError("no correctly labelled samples")
    v_c = float(np.mean(per_class))

    bad = np.flatnonzero(~clean)
    if bad.size == 0:
        return v_c, None
    missing = {int(true_labels[i]) for i in bad if true_labels[i] not in centroids}
    if missing:
        raise ValueError(f"identities {sorted(missing)} have no correctly labelled sample")
    d2 = [((e[i] - centroids[true_labels[i]]) ** 2).sum() for i in bad]
    return v_c, float(np.mean(d2))


def detection_auc(scores, is_clean):
    """Mann-Whitney AUC: P(score of a clean sample > score of a noisy one), ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_clean, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("detection_auc needs both clean and noisy samples")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def report_row(stage, epoch, report, v_c, v_a, auc, seed):
    def fmt(v):
        return "" if v is None else f"{v:.10g}"

    return [stage, epoch, fmt(report.rank1), fmt(report.rank5), fmt(report.rank10),
            fmt(report.map), fmt(v_c), fmt(v_a), fmt(auc), seed]
