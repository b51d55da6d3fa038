"""Online pair/triplet miners over a batch of embeddings.

All miners return index sets sorted lexicographically so downstream losses
are order-deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_EMPTY = np.zeros(0, dtype=np.int64)


@dataclass
class TripletIndexSet:
    anchors: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    positives: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    negatives: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    fallback_count: int = 0

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def as_tuples(self):
        return list(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))

    def validate(self, labels) -> None:
        labels = np.asarray(labels)
        a, p, n = self.anchors, self.positives, self.negatives
        if np.any(labels[a] != labels[p]) or np.any(labels[a] == labels[n]) or np.any(a == p):
            raise ValueError("triplet set violates label constraints")


@dataclass
class PairIndexSet:
    positive_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    negative_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positive_pairs) + len(self.negative_pairs)

    @property
    def empty(self) -> bool:
        return len(self) == 0


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _positive_pairs(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return np.nonzero(same)


def _triplets(a, p, n, fallback=0) -> TripletIndexSet:
    a, p, n = (np.asarray(v, dtype=np.int64) for v in (a, p, n))
    order = np.lexsort((n, p, a))
    return TripletIndexSet(a[order], p[order], n[order], fallback)


def mine_semi_hard_triplets(embeddings, labels, margin: float = 1.25) -> TripletIndexSet:
    """Triplets with ``d(a,p) < d(a,n) < d(a,p) + margin`` over ordered positive pairs.

    A positive pair whose band holds no negative falls back to its hardest
    (closest) negative, lowest index on ties; ``fallback_count`` records how
    many pairs did so.
    """
    labels = np.asarray(labels)
    dist = pairwise_distances(embeddings)
    anchors, positives = _positive_pairs(labels)
    if len(anchors) == 0:
        return TripletIndexSet()
    d_ap = dist[anchors, positives][:, None]
    d_an = dist[anchors]
    negative = labels[None, :] != labels[anchors][:, None]
    band = negative & (d_an > d_ap) & (d_an < d_ap + margin)
    pair_idx, neg_idx = np.nonzero(band)

    empty_band = ~band.any(axis=1) & negative.any(axis=1)
    hardest = np.where(negative, d_an, np.inf).argmin(axis=1)
    fb = np.flatnonzero(empty_band)
    if len(fb):
        logger.debug("semi-hard band empty for %d of %d positive pairs; using hardest negative",
                     len(fb), len(anchors))

    pair_idx = np.concatenate([pair_idx, fb])
    neg_idx = np.concatenate([neg_idx, hardest[fb]])
    return _triplets(anchors[pair_idx], positives[pair_idx], neg_idx, fallback=len(fb))


def mine_margin_pairs(embeddings, labels, margin: float = 1.0,
                      pos_threshold: float | None = None) -> PairIndexSet:
    """Violating pairs only: positives farther than ``pos_threshold``, negatives closer than ``margin``.

    ``pos_threshold`` defaults to ``0.2 * margin``. Pairs are unordered (i < j).
    """
    if pos_threshold is None:
        pos_threshold = 0.2 * margin
    labels = np.asarray(labels)
    dist = pairwise_distances(embeddings)
    upper = np.triu(np.ones_like(dist, dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    pos = np.argwhere(upper & same & (dist > pos_threshold))
    neg = np.argwhere(upper & ~same & (dist < margin))
    return PairIndexSet(pos.astype(np.int64), neg.astype(np.int64))


def negative_angles(embeddings, anchors, positives, negatives) -> np.ndarray:
    """Angle (radians) at the negative: ``atan(d(a,p) / (2 d(n, (a+p)/2)))``."""
    x = np.asarray(embeddings, dtype=np.float64)
    xa, xp, xn = x[anchors], x[positives], x[negatives]
    ap = np.sqrt(((xa - xp) ** 2).sum(axis=-1))
    nc = np.sqrt(((xn - (xa + xp) / 2.0) ** 2).sum(axis=-1))
    return np.arctan2(ap, 2.0 * nc)


def mine_angular_triplets(embeddings, labels, alpha_degrees: float = 45.0,
                          chunk: int = 512) -> TripletIndexSet:
    """All label-valid triplets whose angle at the negative exceeds ``alpha``."""
    labels = np.asarray(labels)
    x = np.asarray(embeddings, dtype=np.float64)
    threshold = np.deg2rad(alpha_degrees)
    anchors, positives = _positive_pairs(labels)
    keep_a, keep_p, keep_n = [], [], []
    n = len(labels)
    for start in range(0, len(anchors), chunk):
        a = anchors[start : start + chunk]
        p = positives[start : start + chunk]
        aa = np.repeat(a, n)
        pp = np.repeat(p, n)
        nn = np.tile(np.arange(n), len(a))
        valid = labels[nn] != labels[aa]
        aa, pp, nn = aa[valid], pp[valid], nn[valid]
        hit = negative_angles(x, aa, pp, nn) > threshold
        keep_a.append(aa[hit])
        keep_p.append(pp[hit])
        keep_n.append(nn[hit])
    if not keep_a:
        return TripletIndexSet()
    return _triplets(np.concatenate(keep_a), np.concatenate(keep_p), np.concatenate(keep_n))
