"""Incremental training strategies behind one session-by-session interface.

Each strategy owns whatever it carries between sessions (Fisher diagonal,
autoencoders, exemplar or VAE store). The harness drives it with
``after_base`` once and ``session`` for every incremental class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Type

import numpy as np

from .. import rng as rngmod
from ..losses import EWC_IMPORTANCE
from ..network import EmbeddingNet
from .common import (
    FitResult,
    LossConfig,
    SessionData,
    SimilarityObjective,
    TrainConfig,
    TrainingAborted,
    train_base,
    train_normal_session,
)
from .ebll import FeatureAutoencoder, train_ebll_session, train_feature_autoencoder
from .ewc import estimate_fisher, train_ewc_session
from .replay import (
    ClassVAE,
    ExemplarStore,
    default_budget,
    fit_class_vae,
    fit_store_vaes,
    sample_replay_features,
    seed_exemplar_store,
    select_exemplars,
    train_icarl_session,
    train_vae_replay_session,
)

STRATEGY_NAMES = ("normal", "ewc", "ebll", "icarl", "vae")


@dataclass
class StrategyParams:
    ewc_importance: float = EWC_IMPORTANCE
    ae_weight: float = 1.0
    distill_weight: float = 1.0
    budget: Optional[int] = None
    vae_epochs: int = 50


# old-class data lookup granted by the harness: class id -> that class's SessionData
OldClassLookup = Callable[[int], SessionData]


class Strategy:
    name = "normal"
    needs_paired_class = True
    final_conv_activation = "relu"

    def __init__(self, objective: SimilarityObjective, config: TrainConfig,
                 params: Optional[StrategyParams] = None):
        self.objective = objective
        self.config = config
        self.params = params or StrategyParams()

    def after_base(self, net: EmbeddingNet, base_data: SessionData, seed: int) -> None:
        """Prepare carried state once the base model is trained."""

    def session(self, net: EmbeddingNet, new_data: SessionData,
                paired: Optional[SessionData], seed: int) -> FitResult:
        return train_normal_session(net, new_data, paired, self.objective, self.config, seed)


class NormalStrategy(Strategy):
    pass


class EWCStrategy(Strategy):
    name = "ewc"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fisher = None

    def after_base(self, net, base_data, seed):
        self.fisher = estimate_fisher(net, base_data, self.objective, self.config.batch_size,
                                      seed, self.params.ewc_importance)

    def session(self, net, new_data, paired, seed):
        data = new_data if paired is None else new_data + paired
        result, self.fisher = train_ewc_session(net, self.fisher, data, self.objective,
                                                self.config, seed)
        return result


class EBLLStrategy(Strategy):
    name = "ebll"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.autoencoders: List[FeatureAutoencoder] = []

    def after_base(self, net, base_data, seed):
        self.autoencoders = [train_feature_autoencoder(net, base_data, self.objective, self.config,
                                                       seed, self.params.ae_weight)]

    def session(self, net, new_data, paired, seed):
        data = new_data if paired is None else new_data + paired
        result, self.autoencoders = train_ebll_session(net, self.autoencoders, data, self.objective,
                                                       self.config, seed, self.params.ae_weight)
        return result


class ICaRLStrategy(Strategy):
    name = "icarl"
    needs_paired_class = False

    def __init__(self, *args, class_count: int = 10, **kwargs):
        super().__init__(*args, **kwargs)
        budget = self.params.budget or default_budget(class_count)
        self.store = ExemplarStore("images", budget)

    def after_base(self, net, base_data, seed):
        self.store = seed_exemplar_store(net, base_data, self.store.budget)

    def session(self, net, new_data, paired, seed):
        result, self.store = train_icarl_session(net, self.store, new_data, self.objective,
                                                 self.config, seed, self.params.distill_weight)
        return result


class VAEReplayStrategy(Strategy):
    name = "vae"
    needs_paired_class = False
    final_conv_activation = "sigmoid"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.store = ExemplarStore("vae")

    @property
    def vae_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(min(self.params.vae_epochs, max(c.epochs, 1)), c.batch_size, c.patience,
                           c.learning_rate)

    def after_base(self, net, base_data, seed):
        net.freeze_feature_extractor()
        fit_store_vaes(net, self.store, base_data, self.vae_config, seed)

    def session(self, net, new_data, paired, seed):
        result, self.store = train_vae_replay_session(net, self.store, new_data, self.objective,
                                                      self.config, seed, self.params.distill_weight,
                                                      self.vae_config)
        return result


STRATEGIES: Dict[str, Type[Strategy]] = {
    "normal": NormalStrategy,
    "ewc": EWCStrategy,
    "ebll": EBLLStrategy,
    "icarl": ICaRLStrategy,
    "vae": VAEReplayStrategy,
}


def make_strategy(name: str, objective: SimilarityObjective, config: TrainConfig,
                  params: Optional[StrategyParams] = None, class_count: int = 10) -> Strategy:
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {STRATEGY_NAMES}")
    if name == "icarl":
        return ICaRLStrategy(objective, config, params, class_count=class_count)
    return STRATEGIES[name](objective, config, params)


__all__ = [
    "ClassVAE", "EBLLStrategy", "EWCStrategy", "ExemplarStore", "FeatureAutoencoder", "FitResult",
    "ICaRLStrategy", "LossConfig", "NormalStrategy", "SessionData", "SimilarityObjective",
    "Strategy", "StrategyParams", "STRATEGIES", "STRATEGY_NAMES", "TrainConfig", "TrainingAborted",
    "VAEReplayStrategy", "estimate_fisher", "fit_class_vae", "make_strategy",
    "sample_replay_features", "select_exemplars", "train_base", "train_ebll_session",
    "train_ewc_session", "train_icarl_session", "train_normal_session", "train_vae_replay_session",
]
