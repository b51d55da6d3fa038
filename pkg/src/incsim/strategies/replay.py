"""Exemplar rehearsal (iCaRL-style) and per-class VAE latent replay."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import rng as rngmod
from ..losses import angle_distill_loss, binary_cross_entropy, kd_distill_loss, vae_loss
from ..network import (
    ConfigurationError,
    EmbeddingNet,
    _uniform_fan_in,
    conv_features,
    embed,
    load_arrays,
    save_arrays,
)
from ..tensor import Tensor, linear, no_grad
from .common import (
    FitResult,
    SessionData,
    SimilarityObjective,
    TrainConfig,
    batched_mean,
    fit,
    net_snapshot,
    teacher_embeddings,
    train_on_pool,
)

logger = logging.getLogger(__name__)

DEFAULT_BUDGETS = {10: 200, 26: 520}
LATENT_DIM = 128


# -- exemplar selection ------------------------------------------------------------


@dataclass
class ExemplarSelection:
    indices: Dict[int, np.ndarray]
    short_classes: List[int] = field(default_factory=list)


def select_exemplars(embeddings, labels, k: int) -> ExemplarSelection:
    """Per class, the ``k`` items nearest (Euclidean) to the class mean embedding.

    Indices come back ordered by distance, ties by index. Classes with fewer
    than ``k`` items contribute everything and are listed in ``short_classes``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    x = np.asarray(getattr(embeddings, "vectors", embeddings), dtype=np.float64)
    labels = np.asarray(labels)
    chosen, short = {}, []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        centre = x[idx].mean(axis=0)
        dist = np.sqrt(((x[idx] - centre) ** 2).sum(axis=1))
        ranked = idx[np.lexsort((idx, dist))]
        if len(idx) < k:
            short.append(c)
        chosen[c] = ranked[:k]
    if short:
        logger.info("classes %s have fewer than %d items; keeping all", short, k)
    return ExemplarSelection(chosen, short)


def per_class_quota(budget: int, seen_classes: int) -> int:
    return budget // seen_classes


# -- class VAE -----------------------------------------------------------------------


class ClassVAE:
    """Encoder D->256->128 with 128-d mean/log-variance heads; decoder 128->256->D, sigmoid out."""

    LAYERS = {
        "enc1": ("in", 256),
        "enc2": (256, 128),
        "mu": (128, LATENT_DIM),
        "log_var": (128, LATENT_DIM),
        "dec1": (LATENT_DIM, 256),
        "dec2": (256, "in"),
    }

    def __init__(self, feature_dim: int = 512, seed: int = 0):
        self.feature_dim = feature_dim
        self.seed = seed
        gen = rngmod.stream(seed, "class-vae-init")
        self.params: Dict[str, Tensor] = {}
        for name, (fan_in, fan_out) in self.LAYERS.items():
            fan_in = feature_dim if fan_in == "in" else fan_in
            fan_out = feature_dim if fan_out == "in" else fan_out
            self.params[f"{name}.weight"] = Tensor(
                _uniform_fan_in(gen, (fan_in, fan_out), fan_in), True, f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out), True, f"{name}.bias")

    def _layer(self, name, x):
        return linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def encode(self, features) -> Tuple[Tensor, Tensor]:
        h = self._layer("enc1", Tensor.lift(features)).relu()
        h = self._layer("enc2", h).relu()
        return self._layer("mu", h), self._layer("log_var", h)

    def decode(self, z) -> Tensor:
        h = self._layer("dec1", Tensor.lift(z)).relu()
        return self._layer("dec2", h).sigmoid()

    def __call__(self, features, noise: np.ndarray):
        mu, log_var = self.encode(features)
        z = mu + (log_var * 0.5).exp() * noise
        return self.decode(z), mu, log_var

    def sample(self, count: int, gen: np.random.Generator) -> np.ndarray:
        with no_grad():
            return self.decode(gen.standard_normal((count, LATENT_DIM))).data

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def reconstruction_bce(self, features: np.ndarray) -> float:
        """Mean BCE of the deterministic (posterior-mean) reconstruction."""
        with no_grad():
            mu, _ = self.encode(features)
            return float(binary_cross_entropy(self.decode(mu), features).data)


def fit_class_vae(net: EmbeddingNet, features: np.ndarray, config: TrainConfig, seed: int,
                  holdout: float = 0.1) -> Tuple[ClassVAE, FitResult]:
    """Train one VAE on a single class's frozen conv features.

    10% of the rows are held out; early stopping watches their reconstruction BCE.
    """
    if not net.frozen_feature_extractor:
        raise ConfigurationError("refusing to fit a replay VAE on an unfrozen feature extractor")
    features = np.asarray(features, dtype=np.float64)
    if features.size and (features.min() < 0 or features.max() > 1):
        raise ConfigurationError("replay VAE features must lie in [0, 1]")
    gen = rngmod.stream(seed, "vae-split")
    order = gen.permutation(len(features))
    n_hold = max(1, int(round(holdout * len(features))))
    held, train = features[order[:n_hold]], features[order[n_hold:]]
    vae = ClassVAE(features.shape[1], seed=rngmod.child_seed(seed, "vae-init"))
    noise_gen = rngmod.stream(seed, "vae-noise")

    def batch_loss(idx, step):
        noise = noise_gen.standard_normal((len(idx), LATENT_DIM))
        recon, mu, log_var = vae(train[idx], noise)
        return vae_loss(recon, train[idx], mu, log_var)

    result = fit(list(vae.params.values()), batch_loss, len(train),
                 lambda: vae.reconstruction_bce(held), config, rngmod.stream(seed, "vae-batches"),
                 label="class-vae")
    vae.freeze()
    return vae, result


# -- store -----------------------------------------------------------------------------


@dataclass
class ExemplarStore:
    """Retained knowledge per seen class: raw exemplar images or a trained VAE."""

    mode: str = "images"
    budget: int = 200
    images: Dict[int, np.ndarray] = field(default_factory=dict)
    vaes: Dict[int, ClassVAE] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("images", "vae"):
            raise ValueError(f"unknown store mode {self.mode!r}")

    @property
    def classes(self) -> List[int]:
        return sorted(self.images if self.mode == "images" else self.vaes)

    def __len__(self) -> int:
        return len(self.classes)

    def total_exemplars(self) -> int:
        return sum(len(v) for v in self.images.values())

    def exemplar_pool(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.images:
            return None, np.zeros(0, dtype=np.int64)
        xs = [self.images[c] for c in self.classes]
        ys = [np.full(len(self.images[c]), c, dtype=np.int64) for c in self.classes]
        return np.concatenate(xs), np.concatenate(ys)

    def rebalance(self, net: EmbeddingNet, new_items: Dict[int, np.ndarray]) -> None:
        """Re-select every class's exemplars with ``net`` under ``budget // seen``."""
        candidates = {c: self.images[c] for c in self.classes}
        candidates.update(new_items)
        k = per_class_quota(self.budget, len(candidates))
        if k < 1:
            raise ValueError(f"budget {self.budget} cannot hold {len(candidates)} classes")
        for c in sorted(candidates):
            pool = candidates[c]
            emb = embed(net, pool).vectors
            pick = select_exemplars(emb, np.full(len(pool), c), k).indices[c]
            self.images[c] = pool[pick].copy()

    # manifest: one "key value" pair per line; per-class files alongside
    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        lines = [f"mode {self.mode}", f"budget {self.budget}",
                 "classes " + " ".join(map(str, self.classes))]
        for c in self.classes:
            path = os.path.join(directory, f"class_{c}.npz")
            if self.mode == "images":
                save_arrays(path, {"images": self.images[c]}, {"kind": "exemplars", "class": c})
            else:
                vae = self.vaes[c]
                save_arrays(path, vae.state_dict(),
                            {"kind": "class_vae", "class": c, "feature_dim": vae.feature_dim,
                             "seed": vae.seed})
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str) -> "ExemplarStore":
        fields = {}
        with open(os.path.join(directory, "manifest.txt")) as fh:
            for line in fh:
                key, _, value = line.strip().partition(" ")
                fields[key] = value
        store = cls(mode=fields["mode"], budget=int(fields["budget"]))
        for c in [int(v) for v in fields.get("classes", "").split()]:
            descriptor, arrays = load_arrays(os.path.join(directory, f"class_{c}.npz"))
            if store.mode == "images":
                store.images[c] = arrays["images"]
            else:
                vae = ClassVAE(descriptor["feature_dim"], seed=descriptor["seed"])
                for n, value in arrays.items():
                    vae.params[n].data = value
                vae.freeze()
                store.vaes[c] = vae
        return store


def default_budget(class_count: int) -> int:
    return DEFAULT_BUDGETS.get(class_count, 20 * class_count)


# -- iCaRL ---------------------------------------------------------------------------


def _distill_term(objective: SimilarityObjective, net: EmbeddingNet, teacher_out: np.ndarray,
                  emb: Tensor, weight: float, teacher_classes: int) -> Tensor:
    if objective.uses_head:
        student_logits = net.logits(emb)[:, :teacher_classes]
        return kd_distill_loss(teacher_out, student_logits, objective.config.kd_temperature) * weight
    if len(emb.data) < 3:  # no angle instances in a batch this small
        return Tensor(np.zeros(()))
    return angle_distill_loss(teacher_out, emb) * weight


def train_icarl_session(net: EmbeddingNet, store: ExemplarStore, session_data: SessionData,
                        objective: SimilarityObjective, config: TrainConfig, seed: int,
                        distill_weight: float = 1.0) -> Tuple[FitResult, ExemplarStore]:
    """Rehearse stored exemplars alongside the session data with distillation to a frozen teacher.

    Angle-wise distillation on embeddings is used for pair/triplet losses;
    centre loss distils softened classifier outputs over the teacher's classes.
    Exemplar sets are re-selected under the budget afterwards.
    """
    if store.mode != "images":
        raise ConfigurationError("iCaRL needs an image exemplar store")
    ex_x, ex_y = store.exemplar_pool()
    data = session_data
    if len(ex_y):
        # exemplars double as validation rehearsal; there is no other old-class data
        data = session_data + SessionData(ex_x, ex_y, ex_x, ex_y)

    extra = None
    if distill_weight != 0 and store.classes:
        teacher = net.copy()
        teacher_classes = teacher.num_classes
        if objective.uses_head:
            with no_grad():
                t_train = teacher.logits(Tensor(teacher_embeddings(teacher, data.train_x))).data
                t_val = teacher.logits(Tensor(teacher_embeddings(teacher, data.val_x))).data
        else:
            t_train = teacher_embeddings(teacher, data.train_x)
            t_val = teacher_embeddings(teacher, data.val_x)

        def extra(idx, features, emb, training):
            target = (t_train if training else t_val)[idx]
            return _distill_term(objective, net, target, emb, distill_weight, teacher_classes)

    result = train_on_pool(net, data, objective, config, seed, extra=extra)

    new_items = {}
    for c in session_data.classes:
        if c not in store.images:
            new_items[c] = session_data.train_x[session_data.train_y == c]
    store.rebalance(net, new_items)
    return result, store


def seed_exemplar_store(net: EmbeddingNet, data: SessionData, budget: int) -> ExemplarStore:
    store = ExemplarStore("images", budget)
    store.rebalance(net, {c: data.train_x[data.train_y == c] for c in data.classes})
    return store


# -- VAE latent replay ---------------------------------------------------------------


def fit_store_vaes(net: EmbeddingNet, store: ExemplarStore, data: SessionData,
                   config: TrainConfig, seed: int) -> ExemplarStore:
    """Fit a VAE for every class of ``data`` that the store has not seen (merged by class id)."""
    if store.mode != "vae":
        raise ConfigurationError("VAE replay needs a VAE store")
    for c in data.classes:
        if c in store.vaes:
            continue
        train = conv_features(net, data.train_x[data.train_y == c])
        val = conv_features(net, data.val_x[data.val_y == c])
        vae, _ = fit_class_vae(net, np.concatenate([train, val]), config,
                               rngmod.child_seed(seed, "class-vae", c))
        store.vaes[c] = vae
    return store


def sample_replay_features(store: ExemplarStore, per_class_count, seed: int):
    """Decoded features per seen class (sorted class ids) with labels attached.

    ``per_class_count`` is an int or a mapping class -> count. An empty store
    gives an empty batch.
    """
    if store.mode != "vae":
        raise ConfigurationError("replay sampling needs a VAE store")
    if not store.vaes:
        logger.warning("replay requested from an empty VAE store")
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    xs, ys = [], []
    for c in store.classes:
        count = per_class_count if isinstance(per_class_count, (int, np.integer)) else per_class_count[c]
        if count <= 0:
            continue
        xs.append(store.vaes[c].sample(int(count), rngmod.stream(seed, "replay", c)))
        ys.append(np.full(int(count), c, dtype=np.int64))
    if not xs:
        return np.zeros((0, store.vaes[store.classes[0]].feature_dim)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def _balanced_counts(classes: List[int], total: int, gen: np.random.Generator) -> Dict[int, int]:
    base, extra = divmod(total, len(classes))
    lucky = set(gen.choice(classes, size=extra, replace=False).tolist()) if extra else set()
    return {c: base + (1 if c in lucky else 0) for c in classes}


def train_vae_replay_session(net: EmbeddingNet, store: ExemplarStore, session_data: SessionData,
                             objective: SimilarityObjective, config: TrainConfig, seed: int,
                             distill_weight: float = 1.0,
                             vae_config: Optional[TrainConfig] = None) -> Tuple[FitResult, ExemplarStore]:
    """Train the fully-connected layers on real new-class conv features mixed 50/50 with replay.

    Replayed features are drawn fresh for every minibatch, balanced over the
    stored classes. Distillation compares student embeddings with those of the
    pre-session network on the whole mixed batch. A VAE for each new class is
    fitted afterwards.
    """
    if not net.frozen_feature_extractor:
        raise ConfigurationError("latent replay requires a frozen feature extractor")
    if store.mode != "vae":
        raise ConfigurationError("latent replay needs a VAE store")
    real_train = conv_features(net, session_data.train_x)
    real_val = conv_features(net, session_data.val_x)
    classes = store.classes
    objective.register_classes(net, list(session_data.classes) + classes)

    teacher = net.copy()
    teacher_classes = teacher.num_classes
    use_distill = distill_weight != 0 and bool(classes)
    half = max(1, config.batch_size // 2)
    replay_gen = rngmod.stream(seed, "replay-batches")

    val_counts = _balanced_counts(classes, len(real_val), rngmod.stream(seed, "val-counts")) if classes else {}
    val_replay_x, val_replay_y = (sample_replay_features(store, val_counts, rngmod.child_seed(seed, "val-replay"))
                                  if classes else (np.zeros((0, net.feature_dim)), np.zeros(0, dtype=np.int64)))

    def teacher_out(features):
        with no_grad():
            emb = teacher.embed_features(features)
            return teacher.logits(emb).data if objective.uses_head else emb.data

    def loss_of(features, labels, training):
        emb = net.embed_features(features)
        loss = objective(net, emb, labels, update=training)
        if use_distill:
            loss = loss + _distill_term(objective, net, teacher_out(features), emb,
                                        distill_weight, teacher_classes)
        return loss

    def batch_loss(idx, step):
        feats, labels = real_train[idx], session_data.train_y[idx]
        if classes:
            counts = _balanced_counts(classes, half, replay_gen)
            rx, ry = sample_replay_features(store, counts, int(replay_gen.integers(2**62)))
            feats, labels = np.concatenate([feats, rx]), np.concatenate([labels, ry])
        return loss_of(feats, labels, True)

    val_x = np.concatenate([real_val, val_replay_x]) if classes else real_val
    val_y = np.concatenate([session_data.val_y, val_replay_y]) if classes else session_data.val_y

    def validation():
        with no_grad():
            return batched_mean(lambda idx: float(loss_of(val_x[idx], val_y[idx], False).data),
                                len(val_y), config.batch_size)

    snapshot, restore = net_snapshot(net, objective)
    train_batch = max(1, config.batch_size - half) if classes else config.batch_size
    result = fit(net.trainable_params(), batch_loss, len(real_train), validation,
                 TrainConfig(config.epochs, train_batch, config.patience, config.learning_rate),
                 rngmod.stream(seed, "session", "batches"), snapshot, restore, "vae-replay")
    fit_store_vaes(net, store, session_data, vae_config or config, seed)
    return result, store
