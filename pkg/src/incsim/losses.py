"""Similarity, distillation, VAE and consolidation losses.

Similarity losses work on raw embedding geometry (Euclidean distances and
inner products). They take index sets produced by :mod:`incsim.miners`; an
empty index set gives a zero loss and an :class:`EmptySelectionWarning`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .miners import PairIndexSet, TripletIndexSet
from .tensor import (
    Tensor,
    clamped_log,
    concat,
    huber,
    log_softmax,
    logsumexp,
    row_distance,
)

logger = logging.getLogger(__name__)

TRIPLET_MARGIN = 1.25
CONTRASTIVE_MARGIN = 1.0
ANGULAR_ALPHA_DEGREES = 45.0
EWC_IMPORTANCE = 150.0
KD_TEMPERATURE = 2.0
HUBER_DELTA = 1.0


class EmptySelectionWarning(UserWarning):
    """A miner produced no pairs/triplets, so the loss is defined as zero."""


def _zero(reason: str) -> Tensor:
    warnings.warn(reason, EmptySelectionWarning, stacklevel=3)
    return Tensor(0.0)


# -- similarity losses --------------------------------------------------------------


def triplet_loss(embeddings: Tensor, triples: TripletIndexSet, margin: float = TRIPLET_MARGIN) -> Tensor:
    if margin <= 0:
        raise ValueError("triplet margin must be positive")
    if len(triples) == 0:
        return _zero("triplet loss on an empty triplet set")
    anchor = embeddings[triples.anchors]
    d_ap = row_distance(anchor, embeddings[triples.positives])
    d_an = row_distance(anchor, embeddings[triples.negatives])
    return (d_ap - d_an + margin).clamp_min(0.0).mean()


def contrastive_loss(embeddings: Tensor, pairs: PairIndexSet,
                     margin: float = CONTRASTIVE_MARGIN) -> Tensor:
    """Mean ``d^2/2`` over positive pairs plus mean ``max(0, margin-d)^2/2`` over negatives."""
    if margin <= 0:
        raise ValueError("contrastive margin must be positive")
    if len(pairs) == 0:
        return _zero("contrastive loss on an empty pair set")
    total = Tensor(0.0)
    if len(pairs.positive_pairs):
        i, j = pairs.positive_pairs.T
        diff = embeddings[i] - embeddings[j]
        total = total + 0.5 * (diff * diff).sum(axis=1).mean()
    if len(pairs.negative_pairs):
        i, j = pairs.negative_pairs.T
        d = row_distance(embeddings[i], embeddings[j])
        gap = (margin - d).clamp_min(0.0)
        total = total + 0.5 * (gap * gap).mean()
    return total


def angular_logits(embeddings: Tensor, triples: TripletIndexSet, alpha_degrees: float) -> Tensor:
    """``4 tan^2(a) (x_a + x_p)^T x_n - 2 (1 + tan^2(a)) x_a^T x_p`` per triple."""
    tan_sq = np.tan(np.deg2rad(alpha_degrees)) ** 2
    xa = embeddings[triples.anchors]
    xp = embeddings[triples.positives]
    xn = embeddings[triples.negatives]
    return 4.0 * tan_sq * ((xa + xp) * xn).sum(axis=1) - 2.0 * (1.0 + tan_sq) * (xa * xp).sum(axis=1)


def angular_loss(embeddings: Tensor, triples: TripletIndexSet,
                 alpha_degrees: float = ANGULAR_ALPHA_DEGREES) -> Tensor:
    """Mean over (anchor, positive) groups of ``log(1 + sum_n exp f_apn)``.

    The sum runs over the negatives the miner kept for that pair and is
    evaluated as a log-sum-exp with an extra zero logit.
    """
    if not 0 < alpha_degrees < 90:
        raise ValueError("angular loss needs 0 < alpha < 90 degrees")
    if len(triples) == 0:
        return _zero("angular loss on an empty triplet set")
    f = angular_logits(embeddings, triples, alpha_degrees)

    keys = triples.anchors * (int(triples.positives.max()) + 1) + triples.positives
    _, group, counts = np.unique(keys, return_inverse=True, return_counts=True)
    width = int(counts.max())
    slot = np.zeros(len(keys), dtype=np.int64)
    seen: Dict[int, int] = {}
    for t, g in enumerate(group):
        slot[t] = seen.get(g, 0)
        seen[g] = slot[t] + 1
    pad, zero = len(keys), len(keys) + 1
    table = np.full((len(counts), width + 1), pad, dtype=np.int64)
    table[group, slot] = np.arange(len(keys))
    table[:, width] = zero
    extended = concat([f, Tensor([-np.inf, 0.0])])
    return logsumexp(extended[table], axis=1).mean()


@dataclass
class CenterState:
    centers: np.ndarray
    lambda_weight: float = 1.0
    center_lr: float = 0.5

    @classmethod
    def zeros(cls, class_count: int, dim: int = 128, **kw) -> "CenterState":
        return cls(np.zeros((class_count, dim)), **kw)

    @property
    def class_count(self) -> int:
        return len(self.centers)

    def expand(self, class_count: int) -> None:
        extra = class_count - len(self.centers)
        if extra < 0:
            raise ValueError("centre state cannot shrink")
        if extra:
            self.centers = np.concatenate([self.centers, np.zeros((extra, self.centers.shape[1]))])

    def copy(self) -> "CenterState":
        return CenterState(self.centers.copy(), self.lambda_weight, self.center_lr)


def center_softmax_loss(features: Tensor, logits: Tensor, labels: np.ndarray,
                        state: CenterState) -> Tuple[Tensor, np.ndarray]:
    """Softmax cross-entropy plus ``lambda/2 * ||x_i - c_{y_i}||^2``, both averaged over the batch.

    Returns the loss and the centre table after one update step
    ``c_j -= lr * sum_{y_i=j}(c_j - x_i) / (1 + n_j)``; the caller decides
    whether to commit it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if len(labels) and labels.max() >= min(k, state.class_count):
        raise ValueError(f"label {labels.max()} outside the {min(k, state.class_count)} known classes")
    rows = np.arange(len(labels))
    ce = -(log_softmax(logits, axis=1)[rows, labels]).mean()
    offset = features - state.centers[labels]
    center_term = (state.lambda_weight / 2.0) * (offset * offset).sum(axis=1).mean()

    x = features.data
    updated = state.centers.copy()
    for c in np.unique(labels):
        members = labels == c
        delta = (state.centers[c] - x[members]).sum(axis=0) / (1.0 + members.sum())
        updated[c] = state.centers[c] - state.center_lr * delta
    return ce + center_term, updated


# -- distillation ------------------------------------------------------------------


def _vertex_cosines(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """cos[i, j, k] = cosine of the angle at x_i between legs to x_j and x_k."""
    n, d = x.shape
    diff = x.reshape(1, n, d) - x.reshape(n, 1, d)
    length = (diff * diff).sum(axis=2, keepdims=True).sqrt()
    zero_leg = length.data[..., 0] == 0
    unit = diff / (length + zero_leg[..., None].astype(np.float64))
    return unit @ unit.transpose(0, 2, 1), zero_leg


def _angle_instances(n: int) -> np.ndarray:
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    return (j < k) & (j != i) & (k != i)


def angle_distill_loss(teacher, student: Tensor, delta: float = HUBER_DELTA,
                       return_skipped: bool = False):
    """Huber loss between teacher and student angle potentials, averaged over angle instances.

    An angle instance is a vertex ``i`` with an unordered pair of other points
    ``{j, k}``; the potential is the cosine of the angle at ``i``. Instances
    with a zero-length leg in either batch are skipped. The teacher side is a
    constant.
    """
    t = teacher.data if isinstance(teacher, Tensor) else getattr(teacher, "vectors", teacher)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != student.shape:
        raise ValueError(f"teacher {t.shape} and student {student.shape} are not row-aligned")
    n = len(t)
    if n < 3:
        raise ValueError("angle distillation needs at least three points")
    t_cos, t_zero = _vertex_cosines(Tensor(t))
    s_cos, s_zero = _vertex_cosines(student)
    degenerate = t_zero | s_zero
    candidates = _angle_instances(n)
    valid = candidates & ~degenerate[:, :, None] & ~degenerate[:, None, :]
    skipped = int(candidates.sum() - valid.sum())
    if skipped:
        logger.debug("angle distillation skipped %d degenerate angle instances", skipped)
    if not valid.any():
        loss = Tensor(0.0)
    else:
        where = np.nonzero(valid)
        loss = huber(s_cos[where] - t_cos.data[where], delta).mean()
    return (loss, skipped) if return_skipped else loss


def kd_distill_loss(teacher_logits, student_logits: Tensor,
                    temperature: float = KD_TEMPERATURE) -> Tensor:
    """Cross-entropy of temperature-softened teacher against softened student, batch mean."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=np.float64) / temperature
    if t.shape != student_logits.shape:
        raise ValueError("teacher and student logits are not aligned")
    t = np.exp(t - t.max(axis=1, keepdims=True))
    soft = t / t.sum(axis=1, keepdims=True)
    return -(log_softmax(student_logits * (1.0 / temperature), axis=1) * soft).sum(axis=1).mean()


# -- VAE ---------------------------------------------------------------------------


def kl_to_standard_normal(mu: Tensor, log_var: Tensor) -> Tensor:
    """``0.5 * sum_d (exp(log_var) + mu^2 - 1 - log_var)``, averaged over rows."""
    return 0.5 * (log_var.exp() + mu * mu - 1.0 - log_var).sum(axis=1).mean()


def binary_cross_entropy(reconstruction: Tensor, target: np.ndarray) -> Tensor:
    y = np.asarray(target, dtype=np.float64)
    return -(clamped_log(reconstruction) * y + clamped_log(1.0 - reconstruction) * (1.0 - y)).mean()


def vae_loss(reconstruction: Tensor, target, mu: Tensor, log_var: Tensor) -> Tensor:
    """Element-mean binary cross-entropy plus the KL divergence to N(0, I)."""
    y = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if y.shape != reconstruction.shape:
        raise ValueError("reconstruction and target are not aligned")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ValueError("VAE targets must lie in [0, 1]")
    return binary_cross_entropy(reconstruction, y) + kl_to_standard_normal(mu, log_var)


# -- elastic weight consolidation --------------------------------------------------


@dataclass
class FisherDiag:
    fisher: Dict[str, np.ndarray]
    anchors: Dict[str, np.ndarray]
    importance: float = EWC_IMPORTANCE
    skipped_batches: int = 0

    def __post_init__(self):
        for name, f in self.fisher.items():
            if np.any(f < 0):
                raise ValueError(f"negative Fisher entry in {name}")
            if f.shape != self.anchors[name].shape:
                raise ValueError(f"Fisher and anchor shapes differ for {name}")

    def accumulate(self, other: "FisherDiag") -> "FisherDiag":
        """Sum the diagonals and take the newer anchors."""
        fisher = {n: self.fisher.get(n, 0.0) + f for n, f in other.fisher.items()}
        return FisherDiag(fisher, {n: a.copy() for n, a in other.anchors.items()}, other.importance)


def ewc_penalty(params: Dict[str, Tensor], fisher: FisherDiag) -> Tensor:
    """``sum_i lambda/2 * F_i * (theta_i - theta*_i)^2`` over the parameters Fisher knows."""
    total = Tensor(0.0)
    for name, f in fisher.fisher.items():
        theta = params[name]
        if theta.shape != f.shape:
            raise ValueError(f"{name}: parameter {theta.shape} vs Fisher {f.shape}")
        shift = theta - fisher.anchors[name]
        total = total + (shift * shift * f).sum()
    return total * (fisher.importance / 2.0)


def compute_fisher_diagonal(params: Dict[str, Tensor],
                            loss_builder: Callable[[object], Optional[Tensor]],
                            batches: Iterable, importance: float = EWC_IMPORTANCE) -> FisherDiag:
    """Diagonal empirical Fisher: mean over batches of the squared loss gradient.

    ``loss_builder`` returns ``None`` (or a constant tensor) for batches where
    mining found nothing; those are skipped and counted.
    """
    sums = {n: np.zeros_like(p.data) for n, p in params.items()}
    used = skipped = 0
    for batch in batches:
        for p in params.values():
            p.grad = None
        loss = loss_builder(batch)
        if loss is None or not loss.requires_grad:
            skipped += 1
            continue
        loss.backward()
        for n, p in params.items():
            if p.grad is not None:
                sums[n] += p.grad * p.grad
        used += 1
    for p in params.values():
        p.grad = None
    if skipped:
        logger.info("Fisher estimate skipped %d batches without valid pairs/triplets", skipped)
    fisher = {n: s / used if used else s for n, s in sums.items()}
    anchors = {n: p.data.copy() for n, p in params.items()}
    return FisherDiag(fisher, anchors, importance, skipped_batches=skipped)


# -- encoder-based lifelong learning -----------------------------------------------


def ebll_code_loss(current_features: Tensor, frozen_features, autoencoder) -> Tensor:
    """Mean squared difference of bottleneck codes; only ``autoencoder.encode`` is used."""
    frozen = np.asarray(getattr(frozen_features, "data", frozen_features), dtype=np.float64)
    if frozen.shape != current_features.shape:
        raise ValueError(
            f"feature shapes differ: current {current_features.shape} vs frozen {frozen.shape}"
        )
    diff = autoencoder.encode(current_features) - autoencoder.encode(Tensor(frozen)).data
    return (diff * diff).mean()
