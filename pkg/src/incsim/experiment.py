"""The sessioned incremental protocol: data preparation, base/ideal models, sessions, artifacts."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from .config import ExperimentConfig
from .datasets import (
    ImageSet,
    SessionPlan,
    augment,
    cap_per_class,
    load_image_set,
    make_session_plan,
    normalize,
    read_label_remap,
    stratified_split,
)
from .evaluation import OmegaReport, SessionLog, SessionRecord, mean_ap_at_r, omega_metrics
from .network import EmbeddingNet, embed, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from .report import CsvRow, read_csv, rows_from_log, write_csv, write_svg
from .strategies import SessionData, SimilarityObjective, TrainingAborted, make_strategy, train_base

logger = logging.getLogger(__name__)

FAILURE_MARKER = "FAILED"


# -- data ------------------------------------------------------------------------------


@dataclass
class PreparedData:
    plan: SessionPlan
    train: ImageSet
    val: ImageSet
    test: ImageSet

    def session_data(self, classes) -> SessionData:
        t, v = self.train.of_classes(classes), self.val.of_classes(classes)
        return SessionData(t.images, t.labels, v.images, v.labels)

    def test_of(self, classes) -> ImageSet:
        return self.test.of_classes(classes)


_RAW_CACHE: Dict[tuple, Tuple[ImageSet, ImageSet]] = {}


def _raw_sets(config: ExperimentConfig) -> Tuple[ImageSet, ImageSet]:
    key = (config.train_images, config.train_labels, config.test_images, config.test_labels,
           config.label_remap)
    if key not in _RAW_CACHE:
        remap = read_label_remap(config.label_remap) if config.label_remap else None
        train = load_image_set(config.train_images, config.train_labels, remap)
        test = load_image_set(config.test_images, config.test_labels, remap)
        count = max(train.class_count, test.class_count)
        _RAW_CACHE[key] = (ImageSet(train.images, train.labels, count),
                           ImageSet(test.images, test.labels, count))
    return _RAW_CACHE[key]


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    """Load, cap, normalize and split; plan the sessions from ``seed``."""
    train, test = _raw_sets(config)
    if config.train_cap_per_class:
        train = cap_per_class(train, config.train_cap_per_class, rngmod.child_seed(seed, "train-cap"))
    if config.test_cap_per_class:
        test = cap_per_class(test, config.test_cap_per_class, rngmod.child_seed(seed, "test-cap"))
    mean, std = config.normalization()
    train, test = normalize(train, mean, std), normalize(test, mean, std)
    kept, val = stratified_split(train, config.validation_fraction, rngmod.child_seed(seed, "split"))
    if config.augment_pad or config.augment_flip:
        gen = rngmod.stream(seed, "augment")
        kept = ImageSet(augment(kept.images, config.augment_pad, config.augment_flip, gen),
                        kept.labels, kept.class_count, True)
    plan = make_session_plan(train.class_count, seed).truncated(config.max_sessions)
    return PreparedData(plan, kept, val, test)


def paired_class(plan: SessionPlan, session: int, mode: str, seed: int) -> int:
    """Previously seen class paired with incremental session ``session`` (1-based).

    ``rotate`` walks a seeded shuffle of the base classes followed by the
    incremental classes in arrival order; ``fixed`` always takes its first entry.
    """
    order = [int(c) for c in rngmod.stream(seed, "pairing").permutation(plan.base_classes)]
    order += plan.incremental_order
    # session t has seen len(base) + t - 1 classes, so index t - 1 is always available
    return order[0] if mode == "fixed" else order[session - 1]


# -- evaluation ------------------------------------------------------------------------


def evaluate_session(net: EmbeddingNet, data: PreparedData, seen: List[int],
                     new_class: Optional[int]) -> Tuple[float, float, float]:
    """(base-test, new-class, all-seen) mAP@R; the base session reports base-test as new-class."""
    test = data.test_of(seen)
    vectors = embed(net, test.images).vectors
    is_base = np.isin(test.labels, data.plan.base_classes)
    alpha_all = mean_ap_at_r(vectors, test.labels)
    alpha_base = mean_ap_at_r(vectors[is_base], test.labels[is_base])
    if new_class is None:
        return alpha_base, alpha_base, alpha_all
    alpha_new = mean_ap_at_r(vectors, test.labels, query_mask=test.labels == new_class)
    return alpha_base, alpha_new, alpha_all


# -- base / ideal models ---------------------------------------------------------------


def run_directory(config: ExperimentConfig, seed: int) -> str:
    return os.path.join(config.output_dir, config.dataset, config.loss, f"seed{seed}")


def _save_objective(path: str, objective: SimilarityObjective) -> None:
    rows = np.array(sorted(objective.class_rows.items()), dtype=np.int64).reshape(-1, 2)
    arrays = {"class_rows": rows.astype(np.float64)}
    if objective.centers is not None:
        arrays["centers"] = objective.centers.centers
    save_arrays(path, arrays, {"kind": "objective", "loss": objective.config.name})


def _load_objective(path: str, objective: SimilarityObjective) -> None:
    _, arrays = load_arrays(path)
    objective.class_rows = {int(c): int(r) for c, r in arrays["class_rows"].astype(np.int64)}
    if "centers" in arrays:
        objective.centers.centers = arrays["centers"].copy()


def base_model(config: ExperimentConfig, data: PreparedData, seed: int, activation: str,
               objective: SimilarityObjective) -> EmbeddingNet:
    """Train (or reload the cached) base model; strategies with the same conv activation share it."""
    directory = run_directory(config, seed)
    ckpt = os.path.join(directory, f"base_{activation}.npz")
    obj_path = os.path.join(directory, f"base_{activation}_objective.npz")
    if os.path.isfile(ckpt) and os.path.isfile(obj_path):
        _load_objective(obj_path, objective)
        return load_checkpoint(ckpt)
    channels, size = data.train.images.shape[1], data.train.images.shape[2]
    net = EmbeddingNet(channels, size, activation, seed=rngmod.child_seed(seed, "net-init"))
    train_base(net, data.session_data(data.plan.base_classes), objective, config.train_config(),
               rngmod.child_seed(seed, "base"))
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(ckpt, net)
    _save_objective(obj_path, objective)
    return net


def run_offline_ideal(config: ExperimentConfig, seed: int) -> Tuple[float, float]:
    """Jointly train on every class in the run; mAP@R on base-test and on the entire test set."""
    if config.ideal_base is not None and config.ideal_all is not None:
        return config.ideal_base, config.ideal_all
    directory = run_directory(config, seed)
    path = os.path.join(directory, "ideal.json")
    if os.path.isfile(path):
        with open(path) as fh:
            stored = json.load(fh)
        return stored["alpha_ideal_base"], stored["alpha_ideal_all"]
    data = prepare_data(config, seed)
    classes = data.plan.all_classes
    objective = SimilarityObjective(config.loss_config())
    channels, size = data.train.images.shape[1], data.train.images.shape[2]
    net = EmbeddingNet(channels, size, "relu", seed=rngmod.child_seed(seed, "ideal-init"))
    train_base(net, data.session_data(classes), objective, config.train_config(),
               rngmod.child_seed(seed, "ideal"))
    test = data.test_of(classes)
    vectors = embed(net, test.images).vectors
    is_base = np.isin(test.labels, data.plan.base_classes)
    ideal_base = mean_ap_at_r(vectors[is_base], test.labels[is_base])
    ideal_all = mean_ap_at_r(vectors, test.labels)
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(os.path.join(directory, "ideal.npz"), net)
    with open(path, "w") as fh:
        json.dump({"alpha_ideal_base": ideal_base, "alpha_ideal_all": ideal_all,
                   "classes": classes}, fh, indent=2)
    return ideal_base, ideal_all


# -- incremental runs ------------------------------------------------------------------


@dataclass
class RunArtifacts:
    strategy: str
    loss: str
    dataset: str
    seed: int
    directory: str
    log: SessionLog
    omega: Optional[OmegaReport] = None
    checkpoints: List[str] = field(default_factory=list)
    failed: Optional[str] = None

    @property
    def rows(self) -> List[CsvRow]:
        return rows_from_log(self.log, self.strategy, self.loss, self.dataset, self.seed)


def _flush(artifacts: RunArtifacts) -> None:
    d = artifacts.directory
    write_csv(os.path.join(d, "sessions.csv"), artifacts.rows)
    summary = {
        "strategy": artifacts.strategy, "loss": artifacts.loss, "dataset": artifacts.dataset,
        "seed": artifacts.seed, "alpha_ideal_base": artifacts.log.alpha_ideal_base,
        "alpha_ideal_all": artifacts.log.alpha_ideal_all, "checkpoints": artifacts.checkpoints,
        "omega": None if artifacts.omega is None else vars(artifacts.omega),
        "failed": artifacts.failed,
    }
    with open(os.path.join(d, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    marker = os.path.join(d, FAILURE_MARKER)
    if artifacts.failed:
        with open(marker, "w") as fh:
            fh.write(artifacts.failed + "\n")
    elif os.path.exists(marker):
        os.remove(marker)


def run_experiment(config: ExperimentConfig, strategy_name: str, seed: int,
                   ideals: Optional[Tuple[float, float]] = None) -> RunArtifacts:
    """Base model, then one session per incremental class, evaluated after each step.

    Aborted training flushes the sessions completed so far with a failure
    marker and re-raises.
    """
    data = prepare_data(config, seed)
    plan = data.plan
    objective = SimilarityObjective(config.loss_config())
    strategy = make_strategy(strategy_name, objective, config.train_config(), config.strategy_params(),
                             class_count=data.train.class_count)
    directory = os.path.join(run_directory(config, seed), strategy_name)
    os.makedirs(directory, exist_ok=True)
    log = SessionLog()
    artifacts = RunArtifacts(strategy_name, config.loss, config.dataset, seed, directory, log)

    def checkpoint(net, t):
        path = os.path.join(directory, f"session_{t}.npz")
        save_checkpoint(path, net)
        artifacts.checkpoints.append(path)

    if not plan.incremental_order:
        logger.warning("empty incremental schedule; nothing to run for %s", strategy_name)
        _flush(artifacts)
        return artifacts
    try:
        net = base_model(config, data, seed, strategy.final_conv_activation, objective)
        seen = list(plan.base_classes)
        log.append(SessionRecord(1, *evaluate_session(net, data, seen, None), classes_seen=len(seen)))
        checkpoint(net, 0)
        strategy.after_base(net, data.session_data(plan.base_classes), rngmod.child_seed(seed, "after-base"))
        for t, new_class in enumerate(plan.incremental_order, start=1):
            paired = None
            if strategy.needs_paired_class:
                paired = data.session_data([paired_class(plan, t, config.pairing, seed)])
            strategy.session(net, data.session_data([new_class]), paired,
                             rngmod.child_seed(seed, "session", t))
            seen.append(new_class)
            log.append(SessionRecord(t + 1, *evaluate_session(net, data, seen, new_class),
                                     classes_seen=len(seen)))
            checkpoint(net, t)
            logger.info("%s seed %d session %d: base %.4f new %.4f all %.4f", strategy_name, seed, t,
                        log.records[-1].alpha_base, log.records[-1].alpha_new, log.records[-1].alpha_all)
    except TrainingAborted as exc:
        artifacts.failed = str(exc)
        _flush(artifacts)
        raise
    if log.sessions >= 2:
        ideal_base, ideal_all = ideals if ideals is not None else run_offline_ideal(config, seed)
        log.alpha_ideal_base, log.alpha_ideal_all = ideal_base, ideal_all
        artifacts.omega = omega_metrics(log)
    _flush(artifacts)
    return artifacts


def train_base_models(config: ExperimentConfig) -> List[str]:
    """Train and cache every base model the configured strategies need."""
    paths = []
    for seed in config.seeds:
        data = prepare_data(config, seed)
        activations = sorted({make_strategy(s, SimilarityObjective(config.loss_config()),
                                            config.train_config()).final_conv_activation
                              for s in config.strategies})
        for activation in activations:
            base_model(config, data, seed, activation, SimilarityObjective(config.loss_config()))
            paths.append(os.path.join(run_directory(config, seed), f"base_{activation}.npz"))
    return paths


def collect_rows(config: ExperimentConfig) -> List[CsvRow]:
    rows = []
    for seed in config.seeds:
        for strategy in config.strategies:
            path = os.path.join(run_directory(config, seed), strategy, "sessions.csv")
            if os.path.isfile(path):
                rows.extend(read_csv(path))
    return rows


def emit_report(config: ExperimentConfig, rows: Optional[List[CsvRow]] = None) -> List[str]:
    """results.csv over every finished run, plus the base-test chart."""
    rows = collect_rows(config) if rows is None else rows
    out = os.path.join(config.output_dir, config.dataset, config.loss)
    written = [os.path.join(out, "results.csv")]
    write_csv(written[0], rows)
    if config.svg:
        written.append(os.path.join(out, "base_map.svg"))
        write_svg(written[1], rows, f"base-test mAP@R ({config.dataset}, {config.loss})")
    return written


def run_all(config: ExperimentConfig) -> List[RunArtifacts]:
    results = []
    for seed in config.seeds:
        ideals = run_offline_ideal(config, seed) if (config.max_sessions is None or config.max_sessions > 0) else None
        for strategy in config.strategies:
            results.append(run_experiment(config, strategy, seed, ideals))
    emit_report(config, [row for a in results for row in a.rows])
    return results
