"""Training loop, similarity objective and the plain (no-retention) strategy."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .. import rng as rngmod
from ..losses import (
    CenterState,
    angular_loss,
    center_softmax_loss,
    contrastive_loss,
    triplet_loss,
)
from ..miners import mine_angular_triplets, mine_margin_pairs, mine_semi_hard_triplets
from ..network import EMBEDDING_DIM, EmbeddingNet, expand_classifier
from ..optim import Adam, NonFiniteGradient
from ..tensor import Tensor, concat, no_grad

logger = logging.getLogger(__name__)

LOSS_NAMES = ("contrastive", "triplet", "angular", "center")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int = -1, batch: int = -1):
        where = f" (epoch {epoch}, batch {batch})" if epoch >= 0 else ""
        super().__init__(message + where)
        self.epoch = epoch
        self.batch = batch


@dataclass
class LossConfig:
    name: str = "contrastive"
    contrastive_margin: float = 1.0
    pos_threshold: Optional[float] = None
    triplet_margin: float = 1.25
    angular_alpha: float = 45.0
    center_lambda: float = 1.0
    center_lr: float = 0.5
    kd_temperature: float = 2.0

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}; choose from {LOSS_NAMES}")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    patience: int = 5
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.patience < 1:
            raise ValueError("epochs >= 1, batch_size >= 2 and patience >= 1 are required")


@dataclass
class SessionData:
    """Training and validation items (images or features) with class labels."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        self.train_y = np.asarray(self.train_y, dtype=np.int64)
        self.val_y = np.asarray(self.val_y, dtype=np.int64)
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ValueError("session data items and labels are not aligned")

    @property
    def classes(self) -> List[int]:
        return sorted(set(self.train_y.tolist()))

    def __add__(self, other: "SessionData") -> "SessionData":
        return SessionData(
            np.concatenate([self.train_x, other.train_x]),
            np.concatenate([self.train_y, other.train_y]),
            np.concatenate([self.val_x, other.val_x]),
            np.concatenate([self.val_y, other.val_y]),
        )

    def of_classes(self, classes: Sequence[int]) -> "SessionData":
        t = np.isin(self.train_y, list(classes))
        v = np.isin(self.val_y, list(classes))
        return SessionData(self.train_x[t], self.train_y[t], self.val_x[v], self.val_y[v])


class SimilarityObjective:
    """Mines the batch and evaluates the configured similarity loss.

    For centre loss it also owns the class-centre table and the mapping from
    dataset labels to classifier rows, growing both as classes arrive.
    """

    def __init__(self, config: LossConfig):
        self.config = config
        self.class_rows: Dict[int, int] = {}
        self.centers: Optional[CenterState] = None
        if config.name == "center":
            self.centers = CenterState.zeros(0, EMBEDDING_DIM, lambda_weight=config.center_lambda,
                                             center_lr=config.center_lr)

    @property
    def uses_head(self) -> bool:
        return self.config.name == "center"

    def register_classes(self, net: EmbeddingNet, labels) -> None:
        if not self.uses_head:
            return
        for c in sorted(set(np.asarray(labels).tolist())):
            if c not in self.class_rows:
                self.class_rows[c] = len(self.class_rows)
        k = len(self.class_rows)
        if net.num_classes < k:
            expand_classifier(net, k)
        self.centers.expand(k)

    def rows(self, labels) -> np.ndarray:
        return np.array([self.class_rows[int(c)] for c in labels], dtype=np.int64)

    def __call__(self, net: EmbeddingNet, embeddings: Tensor, labels, update: bool = False) -> Tensor:
        cfg = self.config
        labels = np.asarray(labels)
        if cfg.name == "contrastive":
            pairs = mine_margin_pairs(embeddings.data, labels, cfg.contrastive_margin, cfg.pos_threshold)
            return contrastive_loss(embeddings, pairs, cfg.contrastive_margin)
        if cfg.name == "triplet":
            triples = mine_semi_hard_triplets(embeddings.data, labels, cfg.triplet_margin)
            return triplet_loss(embeddings, triples, cfg.triplet_margin)
        if cfg.name == "angular":
            triples = mine_angular_triplets(embeddings.data, labels, cfg.angular_alpha)
            return angular_loss(embeddings, triples, cfg.angular_alpha)
        rows = self.rows(labels)
        loss, new_centers = center_softmax_loss(embeddings, net.logits(embeddings), rows, self.centers)
        if update:
            self.centers.centers = new_centers
        return loss

    def state(self):
        return None if self.centers is None else self.centers.centers.copy()

    def load_state(self, state) -> None:
        if state is not None:
            self.centers.centers = state.copy()


@contextlib.contextmanager
def frozen(params: Sequence[Tensor]):
    """Temporarily stop gradients into ``params``."""
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


@dataclass
class FitResult:
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch] if self.best_epoch >= 0 else float("inf")


def fit(
    params: Sequence[Tensor],
    batch_loss: Callable[[np.ndarray, int], Tensor],
    n_train: int,
    validation_loss: Callable[[], float],
    config: TrainConfig,
    gen: np.random.Generator,
    snapshot: Optional[Callable[[], object]] = None,
    restore: Optional[Callable[[object], None]] = None,
    label: str = "fit",
) -> FitResult:
    """Minibatch Adam with early stopping on validation loss.

    ``batch_loss(indices, step)`` builds the loss of one minibatch. The state
    with the lowest validation loss is restored at the end.
    """
    params = [p for p in params if p.requires_grad]
    opt = Adam(params, lr=config.learning_rate)
    snapshot = snapshot or (lambda: [p.data.copy() for p in params])
    restore = restore or (lambda state: [setattr(p, "data", s.copy()) for p, s in zip(params, state)])
    result = FitResult()
    best_state = None
    stale = 0
    step = 0
    for epoch in range(config.epochs):
        order = gen.permutation(n_train)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n_train, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = batch_loss(idx, step)
            step += 1
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingAborted(f"{label}: non-finite loss", epoch, b)
            total += value * len(idx)
            count += len(idx)
            if not loss.requires_grad:
                continue
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise TrainingAborted(f"{label}: {exc}", epoch, b) from exc
        result.train_losses.append(total / max(count, 1))
        val = validation_loss()
        if not np.isfinite(val):
            raise TrainingAborted(f"{label}: non-finite validation loss", epoch)
        result.val_losses.append(val)
        logger.debug("%s epoch %d train %.5f val %.5f", label, epoch, result.train_losses[-1], val)
        if result.best_epoch < 0 or val < result.val_losses[result.best_epoch]:
            result.best_epoch = epoch
            best_state = snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        restore(best_state)
    opt.zero_grad()
    return result


def batched_mean(fn: Callable[[np.ndarray], float], n: int, batch_size: int) -> float:
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        total += fn(idx) * len(idx)
    return total / max(n, 1)


def net_snapshot(net: EmbeddingNet, objective: SimilarityObjective):
    def snapshot():
        return net.state_dict(), objective.state()

    def restore(state):
        params, centers = state
        for name, value in params.items():
            net.params[name].data = value.copy()
        objective.load_state(centers)

    return snapshot, restore


ExtraTerm = Callable[[np.ndarray, Tensor, Tensor, bool], Optional[Tensor]]


def train_on_pool(
    net: EmbeddingNet,
    data: SessionData,
    objective: SimilarityObjective,
    config: TrainConfig,
    seed: int,
    extra: Optional[ExtraTerm] = None,
    label: str = "session",
) -> FitResult:
    """Fine-tune ``net`` on image data with the similarity loss plus an optional extra term.

    ``extra(indices, features, embeddings, training)`` receives the batch's
    item indices (into the train or validation pool), its conv features and
    its embeddings, and returns an additional loss tensor or ``None``.
    """
    objective.register_classes(net, np.concatenate([data.train_y, data.val_y]))
    gen = rngmod.stream(seed, label, "batches")

    def loss_of(x, y, idx, training):
        features = net.features(x)
        emb = net.embed_features(features)
        loss = objective(net, emb, y, update=training)
        if extra is not None:
            term = extra(idx, features, emb, training)
            if term is not None:
                loss = loss + term
        return loss

    def batch_loss(idx, step):
        return loss_of(data.train_x[idx], data.train_y[idx], idx, True)

    def validation():
        with no_grad():
            return batched_mean(
                lambda idx: float(loss_of(data.val_x[idx], data.val_y[idx], idx, False).data),
                len(data.val_y),
                config.batch_size,
            )

    snapshot, restore = net_snapshot(net, objective)
    return fit(net.trainable_params(), batch_loss, len(data.train_y), validation, config, gen,
               snapshot, restore, label)


def train_base(net: EmbeddingNet, base_data: SessionData, objective: SimilarityObjective,
               config: TrainConfig, seed: int) -> FitResult:
    """Train the initial model on the base classes, keeping the best validation checkpoint."""
    return train_on_pool(net, base_data, objective, config, seed, label="base")


def train_normal_session(net: EmbeddingNet, new_class_data: SessionData,
                         paired_old_class_data: Optional[SessionData],
                         objective: SimilarityObjective, config: TrainConfig,
                         seed: int) -> FitResult:
    """Plain fine-tuning on the new class plus one previously seen class."""
    data = new_class_data if paired_old_class_data is None else new_class_data + paired_old_class_data
    return train_on_pool(net, data, objective, config, seed)


def teacher_embeddings(teacher: EmbeddingNet, x: np.ndarray, batch_size: int = 256,
                       from_features: bool = False) -> np.ndarray:
    out = np.empty((len(x), EMBEDDING_DIM))
    with no_grad():
        for start in range(0, len(x), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = (teacher.embed_features(x[sl]) if from_features else teacher(x[sl])).data
    return out
