"""Encoder-based lifelong learning: code-space constraints from per-session feature autoencoders."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .. import rng as rngmod
from ..losses import ebll_code_loss
from ..network import EmbeddingNet, _uniform_fan_in, raw_conv_features
from ..tensor import Tensor, linear, no_grad
from .common import (
    FitResult,
    SessionData,
    SimilarityObjective,
    TrainConfig,
    TrainingAborted,
    batched_mean,
    fit,
    frozen,
    train_on_pool,
)

CODE_DIM = 128


class FeatureAutoencoder:
    """One-layer sigmoid encoder to a bottleneck code, linear decoder back to feature space."""

    def __init__(self, feature_dim: int, code_dim: int = CODE_DIM, seed: int = 0):
        gen = rngmod.stream(seed, "feature-autoencoder")
        self.params = {
            "enc.weight": Tensor(_uniform_fan_in(gen, (feature_dim, code_dim), feature_dim), True, "enc.weight"),
            "enc.bias": Tensor(np.zeros(code_dim), True, "enc.bias"),
            "dec.weight": Tensor(_uniform_fan_in(gen, (code_dim, feature_dim), code_dim), True, "dec.weight"),
            "dec.bias": Tensor(np.zeros(feature_dim), True, "dec.bias"),
        }

    def encode(self, features) -> Tensor:
        return linear(Tensor.lift(features), self.params["enc.weight"], self.params["enc.bias"]).sigmoid()

    def decode(self, code: Tensor) -> Tensor:
        return linear(code, self.params["dec.weight"], self.params["dec.bias"])

    def __call__(self, features) -> Tensor:
        return self.decode(self.encode(features))

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}


def train_feature_autoencoder(net: EmbeddingNet, data: SessionData, objective: SimilarityObjective,
                              config: TrainConfig, seed: int,
                              reconstruction_weight: float = 1.0) -> FeatureAutoencoder:
    """Fit an autoencoder on the net's current conv features.

    The objective is ``weight * MSE(reconstruction, features)`` plus the
    similarity loss of the reconstructed features pushed through the (fixed)
    fully-connected layers.
    """
    train_f = raw_conv_features(net, data.train_x)
    val_f = raw_conv_features(net, data.val_x)
    ae = FeatureAutoencoder(net.feature_dim, seed=rngmod.child_seed(seed, "ae-init"))
    saved_centers = objective.state()

    def loss_of(f, y):
        recon = ae(f)
        diff = recon - f
        loss = (diff * diff).mean() * reconstruction_weight
        return loss + objective(net, net.embed_features(recon), y)

    def batch_loss(idx, step):
        return loss_of(train_f[idx], data.train_y[idx])

    def validation():
        with no_grad():
            return batched_mean(lambda idx: float(loss_of(val_f[idx], data.val_y[idx]).data),
                                len(val_f), config.batch_size)

    with frozen(list(net.params.values())):
        try:
            fit(list(ae.params.values()), batch_loss, len(train_f), validation, config,
                rngmod.stream(seed, "ae-batches"), label="ebll-autoencoder")
        except TrainingAborted as exc:
            raise TrainingAborted(f"autoencoder reconstruction diverged: {exc}") from exc
    objective.load_state(saved_centers)
    ae.freeze()
    return ae


def train_ebll_session(net: EmbeddingNet, autoencoders: List[FeatureAutoencoder],
                       session_data: SessionData, objective: SimilarityObjective,
                       config: TrainConfig, seed: int,
                       code_weight: float = 1.0) -> Tuple[FitResult, List[FeatureAutoencoder]]:
    """Similarity loss plus ``code_weight * sum_ae MSE(code(current), code(frozen))``.

    Codes of the frozen pre-session conv stack are precomputed once. After
    training a new autoencoder is fitted on the updated features and appended.
    """
    extra = None
    if autoencoders and code_weight != 0:
        frozen_train = raw_conv_features(net, session_data.train_x)
        frozen_val = raw_conv_features(net, session_data.val_x)

        def extra(idx, features, emb, training):
            target = (frozen_train if training else frozen_val)[idx]
            total = Tensor(0.0)
            for ae in autoencoders:
                total = total + ebll_code_loss(features, target, ae)
            return total * code_weight

    result = train_on_pool(net, session_data, objective, config, seed, extra=extra)
    ae = train_feature_autoencoder(net, session_data, objective, config, seed,
                                   reconstruction_weight=code_weight)
    return result, list(autoencoders) + [ae]
