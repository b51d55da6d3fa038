"""Cosine retrieval, mAP@R and retention metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class RankedRetrieval:
    query: int
    order: np.ndarray
    relevant: np.ndarray


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise EvaluationError(f"zero-norm {what} row(s): {zero[:10].tolist()}")
    return x / norms[..., None]


def rank_by_cosine(query: np.ndarray, gallery: np.ndarray, gallery_labels=None,
                   query_label=None, query_index: int = -1) -> RankedRetrieval:
    """Gallery indices by descending cosine similarity, ascending index on ties.

    ``query_index`` (when >= 0) is removed from the ordering.
    """
    q = _unit_rows(np.asarray(query)[None, :], "query")[0]
    g = _unit_rows(gallery, "gallery")
    sims = g @ q
    order = np.argsort(-sims, kind="stable")
    if query_index >= 0:
        order = order[order != query_index]
    if gallery_labels is None or query_label is None:
        relevant = np.zeros(len(order), dtype=bool)
    else:
        relevant = np.asarray(gallery_labels)[order] == query_label
    return RankedRetrieval(query_index, order, relevant)


def average_precision_at_r(relevance, r: int) -> float:
    """``(1/R) sum_{k<=R} P@k * Rel@k`` for a ranked relevance vector."""
    rel = np.asarray(relevance, dtype=bool)
    if r < 1:
        raise EvaluationError("R must be at least 1")
    if r > len(rel):
        raise EvaluationError(f"R={r} exceeds gallery size {len(rel)}")
    top = rel[:r].astype(np.float64)
    precision = np.cumsum(top) / np.arange(1, r + 1)
    return float((precision * top).sum() / r)


def mean_ap_at_r(embeddings, labels=None, query_mask=None) -> float:
    """Mean AP@R with every item querying the rest of the set.

    ``query_mask`` restricts which items act as queries; every item stays in
    the gallery. Ties in cosine similarity go to the lower gallery index.
    """
    if labels is None:
        labels = embeddings.labels
        embeddings = embeddings.vectors
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    queries = np.arange(len(labels)) if query_mask is None else np.flatnonzero(query_mask)
    singleton = set(classes[counts < 2].tolist()) & set(labels[queries].tolist())
    if singleton:
        raise EvaluationError(f"classes with a single item cannot be queried: {sorted(singleton)}")
    unit = _unit_rows(embeddings, "embedding")
    total = 0.0
    for start in range(0, len(queries), 512):
        q = queries[start : start + 512]
        sims = unit[q] @ unit.T
        sims[np.arange(len(q)), q] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")[:, :-1]
        relevant = labels[order] == labels[q][:, None]
        r = relevant.sum(axis=1)
        width = int(r.max())
        top = relevant[:, :width].astype(np.float64)
        ranks = np.arange(1, width + 1)
        within = ranks[None, :] <= r[:, None]
        precision = np.cumsum(top, axis=1) / ranks
        total += float(((precision * top * within).sum(axis=1) / r).sum())
    return total / len(queries)


@dataclass
class SessionRecord:
    session: int
    alpha_base: float
    alpha_new: float
    alpha_all: float
    classes_seen: int = 0

    def __post_init__(self):
        for name in ("alpha_base", "alpha_new", "alpha_all"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise EvaluationError(f"{name}={value} outside [0, 1]")


@dataclass
class SessionLog:
    records: List[SessionRecord] = field(default_factory=list)
    alpha_ideal_base: Optional[float] = None
    alpha_ideal_all: Optional[float] = None

    def append(self, record: SessionRecord) -> None:
        expected = len(self.records) + 1
        if record.session != expected:
            raise EvaluationError(f"session index {record.session}, expected {expected}")
        self.records.append(record)

    @property
    def sessions(self) -> int:
        return len(self.records)


@dataclass
class OmegaReport:
    omega_base: float
    omega_new: float
    omega_all: float


def omega_metrics(log: SessionLog, alpha_ideal_base: Optional[float] = None,
                  alpha_ideal_all: Optional[float] = None) -> OmegaReport:
    """Session-averaged retention (base, all) relative to the offline ideal, and raw new-class mAP."""
    ideal_base = log.alpha_ideal_base if alpha_ideal_base is None else alpha_ideal_base
    ideal_all = log.alpha_ideal_all if alpha_ideal_all is None else alpha_ideal_all
    if log.sessions < 2:
        raise EvaluationError("omega metrics need at least one incremental session (T >= 2)")
    if not ideal_base or not ideal_all or ideal_base <= 0 or ideal_all <= 0:
        raise EvaluationError("offline ideal mAP@R values must be positive")
    later = log.records[1:]
    scale = 1.0 / len(later)
    return OmegaReport(
        omega_base=scale * sum(r.alpha_base / ideal_base for r in later),
        omega_new=scale * sum(r.alpha_new for r in later),
        omega_all=scale * sum(r.alpha_all / ideal_all for r in later),
    )
