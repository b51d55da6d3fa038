"""Convolutional embedding network: three conv/pool blocks, fc 256 -> fc 128 -> linear 128.

Conv kernels are 3x3 with stride 1. The first two convs pad by one and the
third is unpadded, so a 28x28 single-channel input flattens to
128 channels x 2 x 2 = 512 features:

    28 -conv p1-> 28 -pool-> 14 -conv p1-> 14 -pool-> 7 -conv p0-> 5 -pool-> 2

An optional softmax head (K classes) sits on the embedding for centre loss.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .tensor import Tensor, conv2d, linear, max_pool2d, no_grad

EMBEDDING_DIM = 128
CONV_WIDTHS = (32, 64, 128)
CONV_PADDING = (1, 1, 0)
FC_WIDTHS = (256, 128)
MAX_NORMALIZED_MAGNITUDE = 50.0


class ConfigurationError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.vectors) != len(self.labels):
            raise ValueError("embedding rows and labels are not aligned")

    def __len__(self) -> int:
        return len(self.labels)


def _uniform_fan_in(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape)


def conv_output_side(side: int) -> int:
    for pad in CONV_PADDING:
        side = (side + 2 * pad - 3 + 1) // 2
    return side


class EmbeddingNet:
    CONV_NAMES = ("conv1", "conv2", "conv3")
    FC_NAMES = ("fc1", "fc2", "fc3")

    def __init__(
        self,
        in_channels: int = 1,
        image_size: int = 28,
        final_conv_activation: str = "relu",
        num_classes: int = 0,
        seed: int = 0,
    ):
        if final_conv_activation not in ("relu", "sigmoid"):
            raise ConfigurationError(f"unknown final conv activation {final_conv_activation!r}")
        side = conv_output_side(image_size)
        if side < 1:
            raise ConfigurationError(f"image size {image_size} too small for the conv stack")
        self.in_channels = in_channels
        self.image_size = image_size
        self.final_conv_activation = final_conv_activation
        self.seed = seed
        self.feature_dim = CONV_WIDTHS[-1] * side * side
        self.frozen_feature_extractor = False
        self.params: Dict[str, Tensor] = {}

        gen = rngmod.stream(seed, "embedding-net-init")
        channels = in_channels
        for name, width in zip(self.CONV_NAMES, CONV_WIDTHS):
            fan_in = channels * 9
            self._add(f"{name}.weight", _uniform_fan_in(gen, (width, channels, 3, 3), fan_in))
            self._add(f"{name}.bias", np.zeros(width))
            channels = width
        widths = (self.feature_dim,) + FC_WIDTHS + (EMBEDDING_DIM,)
        for name, (fan_in, fan_out) in zip(self.FC_NAMES, zip(widths[:-1], widths[1:])):
            self._add(f"{name}.weight", _uniform_fan_in(gen, (fan_in, fan_out), fan_in))
            self._add(f"{name}.bias", np.zeros(fan_out))
        if num_classes:
            self._add("head.weight", self._fresh_head_rows(0, num_classes))
            self._add("head.bias", np.zeros(num_classes))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _fresh_head_rows(self, start: int, stop: int) -> np.ndarray:
        rows = [
            _uniform_fan_in(rngmod.stream(self.seed, "head-row", k), (EMBEDDING_DIM,), EMBEDDING_DIM)
            for k in range(start, stop)
        ]
        return np.array(rows).reshape(stop - start, EMBEDDING_DIM)

    # -- parameter views --------------------------------------------------------

    @property
    def num_classes(self) -> int:
        head = self.params.get("head.weight")
        return 0 if head is None else head.shape[0]

    def conv_params(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("conv")]

    def fc_params(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("fc")]

    def head_params(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("head")]

    def trainable_params(self) -> List[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def freeze_feature_extractor(self) -> None:
        self.frozen_feature_extractor = True
        for p in self.conv_params():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------------

    def features(self, images) -> Tensor:
        """Flattened output of the conv stack, differentiable."""
        x = Tensor.lift(images)
        last = len(self.CONV_NAMES) - 1
        for i, (name, pad) in enumerate(zip(self.CONV_NAMES, CONV_PADDING)):
            x = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=pad)
            if i == last and self.final_conv_activation == "sigmoid":
                x = x.sigmoid()
            else:
                x = x.relu()
            x = max_pool2d(x, 2)
        return x.flatten()

    def embed_features(self, features) -> Tensor:
        """fc1 -> relu -> fc2 -> relu -> fc3 (linear)."""
        h = Tensor.lift(features)
        h = linear(h, self.params["fc1.weight"], self.params["fc1.bias"]).relu()
        h = linear(h, self.params["fc2.weight"], self.params["fc2.bias"]).relu()
        return linear(h, self.params["fc3.weight"], self.params["fc3.bias"])

    def __call__(self, images) -> Tensor:
        return self.embed_features(self.features(images))

    def logits(self, embeddings: Tensor) -> Tensor:
        if self.num_classes == 0:
            raise ConfigurationError("network has no classifier head")
        return embeddings @ self.params["head.weight"].T + self.params["head.bias"]

    # -- state -----------------------------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "final_conv_activation": self.final_conv_activation,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "frozen_feature_extractor": self.frozen_feature_extractor,
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigurationError(
                f"state keys {sorted(state)} do not match parameters {sorted(self.params)}"
            )
        for n, value in state.items():
            if value.shape != self.params[n].shape:
                raise ConfigurationError(f"{n}: shape {value.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(value, dtype=np.float64)

    def copy(self) -> "EmbeddingNet":
        return net_from_state(self.descriptor(), self.state_dict())


def net_from_state(descriptor: dict, state: Dict[str, np.ndarray]) -> EmbeddingNet:
    net = EmbeddingNet(
        in_channels=descriptor["in_channels"],
        image_size=descriptor["image_size"],
        final_conv_activation=descriptor["final_conv_activation"],
        num_classes=0,
        seed=descriptor["seed"],
    )
    if descriptor.get("num_classes"):
        k = descriptor["num_classes"]
        net._add("head.weight", np.zeros((k, EMBEDDING_DIM)))
        net._add("head.bias", np.zeros(k))
    net.load_state_dict(state)
    if descriptor.get("frozen_feature_extractor"):
        net.freeze_feature_extractor()
    return net


def _chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _check_input(images: np.ndarray) -> None:
    if not np.all(np.isfinite(images)):
        raise ValueError("input images contain non-finite values")
    if images.size and np.abs(images).max() > MAX_NORMALIZED_MAGNITUDE:
        raise ValueError(
            f"input magnitude {np.abs(images).max():.1f} looks unnormalized (expected |x| <= "
            f"{MAX_NORMALIZED_MAGNITUDE})"
        )


def embed(net: EmbeddingNet, images: np.ndarray, labels: Optional[Sequence[int]] = None,
          batch_size: int = 256) -> EmbeddingBatch:
    """Deterministic inference-mode embeddings (no classifier head)."""
    images = np.asarray(images, dtype=np.float64)
    _check_input(images)
    labels = np.zeros(len(images), dtype=np.int64) if labels is None else labels
    out = np.empty((len(images), EMBEDDING_DIM))
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            out[sl] = net(images[sl]).data
    return EmbeddingBatch(out, labels)


def embed_from_features(net: EmbeddingNet, features: np.ndarray, labels=None,
                        batch_size: int = 1024) -> EmbeddingBatch:
    labels = np.zeros(len(features), dtype=np.int64) if labels is None else labels
    out = np.empty((len(features), EMBEDDING_DIM))
    with no_grad():
        for sl in _chunks(len(features), batch_size):
            out[sl] = net.embed_features(features[sl]).data
    return EmbeddingBatch(out, labels)


def conv_features(net: EmbeddingNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Sigmoid-range conv features for latent replay; refuses relu-configured nets."""
    if net.final_conv_activation != "sigmoid":
        raise ConfigurationError(
            "replay-compatible conv features need a sigmoid final conv activation"
        )
    images = np.asarray(images, dtype=np.float64)
    _check_input(images)
    return raw_conv_features(net, images, batch_size)


def raw_conv_features(net: EmbeddingNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = np.empty((len(images), net.feature_dim))
    with no_grad():
        for sl in _chunks(len(images), batch_size):
            out[sl] = net.features(images[sl]).data
    return out


def expand_classifier(net: EmbeddingNet, new_class_count: int) -> EmbeddingNet:
    """Grow the softmax head in place; existing rows are kept bit for bit."""
    current = net.num_classes
    if new_class_count <= current:
        raise ConfigurationError(f"cannot shrink or keep classifier: {current} -> {new_class_count}")
    fresh = net._fresh_head_rows(current, new_class_count)
    if current:
        weight = np.concatenate([net.params["head.weight"].data, fresh], axis=0)
        bias = np.concatenate([net.params["head.bias"].data, np.zeros(new_class_count - current)])
    else:
        weight, bias = fresh, np.zeros(new_class_count)
    net._add("head.weight", weight)
    net._add("head.bias", bias)
    return net


# -- checkpoint container -------------------------------------------------------------
#
# A checkpoint is a numpy .npz archive (zip of .npy members). Every parameter is
# stored as a little-endian float64 array under its dotted name; the member
# "__descriptor__" holds the UTF-8 JSON architecture descriptor as uint8 bytes.


def save_arrays(path: str, arrays: Dict[str, np.ndarray], descriptor: dict) -> None:
    payload = {n: np.asarray(a, dtype="<f8") for n, a in arrays.items()}
    payload["__descriptor__"] = np.frombuffer(
        json.dumps(descriptor, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **payload)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_arrays(path: str):
    with np.load(path, allow_pickle=False) as archive:
        descriptor = json.loads(archive["__descriptor__"].tobytes().decode("utf-8"))
        arrays = {n: archive[n].astype(np.float64) for n in archive.files if n != "__descriptor__"}
    return descriptor, arrays


def save_checkpoint(path: str, net: EmbeddingNet) -> None:
    save_arrays(path, net.state_dict(), {"kind": "embedding_net", **net.descriptor()})


def load_checkpoint(path: str) -> EmbeddingNet:
    descriptor, arrays = load_arrays(path)
    if descriptor.get("kind") != "embedding_net":
        raise ConfigurationError(f"{path} is not an embedding network checkpoint")
    return net_from_state(descriptor, arrays)
