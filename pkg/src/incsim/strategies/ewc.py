"""Elastic weight consolidation with similarity-loss Fisher estimates."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .. import rng as rngmod
from ..losses import EWC_IMPORTANCE, FisherDiag, compute_fisher_diagonal, ewc_penalty
from ..network import EmbeddingNet
from .common import FitResult, SessionData, SimilarityObjective, TrainConfig, train_on_pool


def estimate_fisher(net: EmbeddingNet, data: SessionData, objective: SimilarityObjective,
                    batch_size: int, seed: int, importance: float = EWC_IMPORTANCE) -> FisherDiag:
    """Fisher diagonal of the trainable parameters from minibatches of ``data.train``."""
    params = {n: p for n, p in net.params.items() if p.requires_grad and not n.startswith("head")}
    objective.register_classes(net, data.train_y)
    order = rngmod.stream(seed, "fisher-batches").permutation(len(data.train_y))
    batches = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    saved = objective.state()

    def loss_builder(idx):
        loss = objective(net, net(data.train_x[idx]), data.train_y[idx])
        return loss if loss.requires_grad else None

    fisher = compute_fisher_diagonal(params, loss_builder, batches, importance)
    objective.load_state(saved)
    net.zero_grad()
    return fisher


def train_ewc_session(net: EmbeddingNet, fisher: Optional[FisherDiag], session_data: SessionData,
                      objective: SimilarityObjective, config: TrainConfig,
                      seed: int) -> Tuple[FitResult, FisherDiag]:
    """Similarity loss plus the quadratic EWC anchor; returns the refreshed Fisher.

    A zero importance (or no Fisher yet) leaves the penalty out of the graph
    entirely. The next-session Fisher adds this session's estimate to the
    running diagonal and re-anchors at the new parameters.
    """
    extra = None
    if fisher is not None and fisher.importance != 0:
        def extra(idx, features, emb, training):
            return ewc_penalty(net.params, fisher)

    result = train_on_pool(net, session_data, objective, config, seed, extra=extra)
    importance = EWC_IMPORTANCE if fisher is None else fisher.importance
    fresh = estimate_fisher(net, session_data, objective, config.batch_size, seed, importance)
    return result, fresh if fisher is None else fisher.accumulate(fresh)
