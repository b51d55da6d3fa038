"""Experiment configuration: a flat TOML file, named presets and range checks."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml

from .datasets import NORMALIZATION
from .strategies import STRATEGY_NAMES, LossConfig, StrategyParams, TrainConfig
from .strategies.common import LOSS_NAMES


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    label_remap: str = ""
    norm_mean: Optional[List[float]] = None
    norm_std: Optional[List[float]] = None

    loss: str = "contrastive"
    contrastive_margin: float = 1.0
    pos_threshold: Optional[float] = None
    triplet_margin: float = 1.25
    angular_alpha: float = 45.0
    center_lambda: float = 1.0
    center_lr: float = 0.5
    kd_temperature: float = 2.0

    strategies: List[str] = field(default_factory=lambda: list(STRATEGY_NAMES))
    ewc_importance: float = 150.0
    ae_weight: float = 1.0
    distill_weight: float = 1.0
    budget: Optional[int] = None
    vae_epochs: int = 50
    pairing: str = "rotate"

    epochs: int = 50
    batch_size: int = 64
    patience: int = 5
    learning_rate: float = 1e-3
    seeds: List[int] = field(default_factory=lambda: [0])

    train_cap_per_class: Optional[int] = None
    test_cap_per_class: Optional[int] = None
    max_sessions: Optional[int] = None
    validation_fraction: float = 0.2
    augment_pad: int = 0
    augment_flip: float = 0.0

    ideal_base: Optional[float] = None
    ideal_all: Optional[float] = None
    output_dir: str = "runs"
    svg: bool = True

    # -- derived views ------------------------------------------------------------

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.contrastive_margin, self.pos_threshold, self.triplet_margin,
                          self.angular_alpha, self.center_lambda, self.center_lr, self.kd_temperature)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.patience, self.learning_rate)

    def strategy_params(self) -> StrategyParams:
        return StrategyParams(self.ewc_importance, self.ae_weight, self.distill_weight, self.budget,
                              self.vae_epochs)

    def normalization(self):
        mean, std = NORMALIZATION.get(self.dataset, (None, None))
        mean = self.norm_mean if self.norm_mean is not None else mean
        std = self.norm_std if self.norm_std is not None else std
        if mean is None or std is None:
            raise ConfigError(f"no normalization constants known for dataset {self.dataset!r}")
        return tuple(mean), tuple(std)

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    # -- validation -----------------------------------------------------------------

    def validate(self, check_files: bool = True) -> "ExperimentConfig":
        problems = []

        def need(cond, message):
            if not cond:
                problems.append(message)

        need(self.loss in LOSS_NAMES, f"loss must be one of {LOSS_NAMES}")
        unknown = [s for s in self.strategies if s not in STRATEGY_NAMES]
        need(not unknown and self.strategies, f"strategies must be drawn from {STRATEGY_NAMES}")
        need(self.pairing in ("rotate", "fixed"), "pairing must be 'rotate' or 'fixed'")
        need(self.contrastive_margin > 0, "contrastive_margin must be positive")
        need(self.pos_threshold is None or self.pos_threshold >= 0, "pos_threshold must be >= 0")
        need(self.triplet_margin > 0, "triplet_margin must be positive")
        need(0 < self.angular_alpha < 90, "angular_alpha must lie in (0, 90) degrees")
        need(self.center_lambda >= 0, "center_lambda must be >= 0")
        need(0 < self.center_lr <= 1, "center_lr must lie in (0, 1]")
        need(self.kd_temperature > 0, "kd_temperature must be positive")
        need(self.ewc_importance >= 0, "ewc_importance must be >= 0")
        need(self.ae_weight >= 0, "ae_weight must be >= 0")
        need(self.distill_weight >= 0, "distill_weight must be >= 0")
        need(self.budget is None or self.budget >= 1, "budget must be >= 1")
        need(self.vae_epochs >= 1, "vae_epochs must be >= 1")
        need(1 <= self.epochs <= 1000, "epochs must lie in [1, 1000]")
        need(2 <= self.batch_size <= 4096, "batch_size must lie in [2, 4096]")
        need(self.patience >= 1, "patience must be >= 1")
        need(0 < self.learning_rate < 1, "learning_rate must lie in (0, 1)")
        need(bool(self.seeds) and all(isinstance(s, int) and s >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        need(self.train_cap_per_class is None or self.train_cap_per_class >= 5,
             "train_cap_per_class must be >= 5")
        need(self.test_cap_per_class is None or self.test_cap_per_class >= 2,
             "test_cap_per_class must be >= 2")
        need(self.max_sessions is None or self.max_sessions >= 0, "max_sessions must be >= 0")
        need(0 < self.validation_fraction < 1, "validation_fraction must lie in (0, 1)")
        need(self.augment_pad >= 0 and 0 <= self.augment_flip <= 1, "augmentation out of range")
        for name in ("ideal_base", "ideal_all"):
            value = getattr(self, name)
            need(value is None or 0 < value <= 1, f"{name} must lie in (0, 1]")
        try:
            self.normalization()
        except ConfigError as exc:
            problems.append(str(exc))
        if check_files:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, name)
                need(bool(path) and os.path.isfile(path), f"{name}: file not found: {path!r}")
            if self.label_remap:
                need(os.path.isfile(self.label_remap), f"label_remap: file not found: {self.label_remap!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


PRESETS: Dict[str, Dict[str, Any]] = {
    # CPU-sized: a few hundred images per class, three sessions, short patience
    "desk": {
        "train_cap_per_class": 300,
        "test_cap_per_class": 100,
        "max_sessions": 3,
        "epochs": 40,
        "patience": 3,
        "vae_epochs": 30,
    },
    "full": {},
}

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(ExperimentConfig(), name)
    if name in ("seeds", "strategies") and not isinstance(value, list):
        value = [value]
    if name in ("norm_mean", "norm_std") and value is not None and not isinstance(value, list):
        value = [value]
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{name} must be true or false")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def build_config(values: Dict[str, Any], preset: Optional[str] = None,
                 base_dir: str = ".") -> ExperimentConfig:
    """Merge preset defaults with ``values``; relative file paths resolve against ``base_dir``."""
    merged: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(values)
    kwargs = {k: _coerce(k, v) for k, v in merged.items()}
    for key in ("train_images", "train_labels", "test_images", "test_labels", "label_remap", "output_dir"):
        if kwargs.get(key) and not os.path.isabs(kwargs[key]):
            kwargs[key] = os.path.normpath(os.path.join(base_dir, kwargs[key]))
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str, preset: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a flat TOML file (``key = value`` lines, no tables)."""
    with open(path, "rb") as fh:
        try:
            values = _toml.load(fh)
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: tables are not supported ({nested})")
    preset = values.pop("preset", preset) if preset is None else preset
    values.update(overrides or {})
    return build_config(values, preset, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_override(text: str) -> Dict[str, Any]:
    """``key=value`` with the value read as a TOML literal (bare words fall back to strings)."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not key=value")
    key = key.strip()
    try:
        value = _toml.loads(f"v = {raw.strip()}")["v"]
    except _toml.TOMLDecodeError:
        value = raw.strip()
    return {key: value}
