"""VGG-style target network: specification, initialisation, training, inference.

A model is a plain sequence of layers described by :class:`ModelSpec`. Each
convolution is named ``block<B>_conv<N>`` so that per-layer results line up
with the usual VGG axis labels. When a convolution is directly followed by a
ReLU, the post-activation map is what gets captured, matching VGG
implementations where the activation is fused into the conv layer.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError, TargetIndexError
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: int = 0  # conv
    kernel: int = 3  # conv
    stride: int = 1  # conv
    padding: int = 0  # conv
    units: int = 0  # dense

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "name": self.name}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind == "dense":
            d["units"] = self.units
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            num_classes=int(d["num_classes"]),
            layers=tuple(LayerSpec.from_dict(layer) for layer in d["layers"]),
        )

    @property
    def conv_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "conv"]


def vgg_mini_spec(input_shape=(1, 28, 28), num_classes=10, widths=(16, 32, 64, 64), dense_units=128) -> ModelSpec:
    """Four (conv3x3-relu-conv3x3-relu-maxpool) blocks, then dense-relu-dense.

    Four halvings need a spatial size divisible by 16, so the first conv pads
    enough to round the input up to the next multiple (28 -> 32).
    """
    c, h, w = input_shape
    pad_to = max(-(-h // 16) * 16, -(-w // 16) * 16)
    if h != w or (pad_to - h) % 2:
        raise ConfigurationError(f"vgg-mini needs a square input with even padding, got {h}x{w}")
    first_pad = 1 + (pad_to - h) // 2
    layers: list[LayerSpec] = []
    for b, width in enumerate(widths, start=1):
        for n in (1, 2):
            pad = first_pad if (b, n) == (1, 1) else 1
            layers.append(LayerSpec("conv", f"block{b}_conv{n}", out_channels=width, kernel=3, padding=pad))
            layers.append(LayerSpec("relu", f"block{b}_relu{n}"))
        layers.append(LayerSpec("maxpool", f"block{b}_pool"))
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", units=dense_units),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("dense", "logits", units=num_classes),
    ]
    return ModelSpec(tuple(input_shape), num_classes, tuple(layers))


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape of every layer; raises ConfigurationError on any mismatch."""
    if spec.num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ConfigurationError(f"input shape must be (C,H,W) positive, got {spec.input_shape}")
    names = [layer.name for layer in spec.layers]
    if len(set(names)) != len(names):
        raise ConfigurationError("layer names must be unique")
    if not spec.conv_layers:
        raise ConfigurationError("model needs at least one conv layer")
    dense_idx = [i for i, layer in enumerate(spec.layers) if layer.kind == "dense"]
    if not dense_idx or dense_idx[-1] != len(spec.layers) - 1:
        raise ConfigurationError("the last layer must be the dense classification head")
    if spec.layers[-1].units != spec.num_classes:
        raise ConfigurationError(
            f"classification head has {spec.layers[-1].units} units, expected {spec.num_classes}"
        )
    shape: tuple[int, ...] = tuple(spec.input_shape)
    shapes = []
    for layer in spec.layers:
        if layer.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {layer.kind!r} ({layer.name})")
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ConfigurationError(f"{layer.name}: conv needs a (C,H,W) input, got {shape}")
            if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                raise ConfigurationError(f"{layer.name}: invalid conv hyperparameters")
            c, h, w = shape
            hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
            if layer.kernel > min(hp, wp) or (hp - layer.kernel) % layer.stride or (wp - layer.kernel) % layer.stride:
                raise ConfigurationError(f"{layer.name}: kernel/stride do not tile input {shape}")
            shape = (layer.out_channels, (hp - layer.kernel) // layer.stride + 1, (wp - layer.kernel) // layer.stride + 1)
        elif layer.kind == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ConfigurationError(f"{layer.name}: maxpool needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"{layer.name}: dense needs a flat input, got {shape}")
            if layer.units < 1:
                raise ConfigurationError(f"{layer.name}: dense needs positive units")
            shape = (layer.units,)
        shapes.append(shape)
    return shapes


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(spec)
    out: dict[str, tuple[int, ...]] = {}
    prev: tuple[int, ...] = tuple(spec.input_shape)
    for layer, shape in zip(spec.layers, shapes):
        if layer.kind == "conv":
            out[f"{layer.name}/kernel"] = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
            out[f"{layer.name}/bias"] = (layer.out_channels,)
        elif layer.kind == "dense":
            out[f"{layer.name}/kernel"] = (layer.units, prev[0])
            out[f"{layer.name}/bias"] = (layer.units,)
        prev = shape
    return out


# --------------------------------------------------------------------------- captures


@dataclass
class Prediction:
    probabilities: np.ndarray
    label: int
    top_k: list[tuple[int, float]]


@dataclass
class ActivationCapture:
    """Per-conv-layer feature maps and class-score gradients, plus neuron values.

    Neurons are the channels of the captured conv maps, numbered consecutively
    in layer order; a neuron's activation is its channel's spatial mean.
    """

    feature_maps: dict[str, np.ndarray] = field(default_factory=dict)
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    neurons: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    layer_slices: dict[str, slice] = field(default_factory=dict)
    target_class: int | None = None

    @property
    def neuron_map(self) -> dict[int, float]:
        return {i: float(v) for i, v in enumerate(self.neurons)}


@dataclass
class ForwardResult:
    logits: Tensor
    feature_maps: dict[str, Tensor]


# --------------------------------------------------------------------------- model


class Model:
    """Parameters plus the spec that lays them out. Treated as immutable after training."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], metadata: dict | None = None):
        expected = parameter_shapes(spec)
        if set(params) != set(expected):
            raise ConfigurationError(f"parameter names {sorted(params)} do not match spec")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigurationError(f"{name}: shape {params[name].shape} != {shape}")
        self.spec = spec
        self.params = {k: Tensor(v) for k, v in params.items()}
        self.metadata = dict(metadata or {})
        self.conv_layers = spec.conv_layers
        self._shapes = infer_shapes(spec)
        self._capture_after = self._capture_points()
        self.neuron_slices: dict[str, slice] = {}
        start = 0
        for layer, shape in zip(spec.layers, self._shapes):
            if layer.kind == "conv":
                self.neuron_slices[layer.name] = slice(start, start + shape[0])
                start += shape[0]
        self.num_neurons = start

    def _capture_points(self) -> dict[int, str]:
        # layer index after which each conv's feature map is read
        points = {}
        layers = self.spec.layers
        for i, layer in enumerate(layers):
            if layer.kind == "conv":
                j = i + 1 if i + 1 < len(layers) and layers[i + 1].kind == "relu" else i
                points[j] = layer.name
        return points

    def feature_shape(self, layer: str) -> tuple[int, ...]:
        for idx, name in self._capture_after.items():
            if name == layer:
                return self._shapes[idx]
        raise ConfigurationError(f"unknown conv layer {layer!r}")

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> ForwardResult:
        """Batched forward pass; ``x`` has shape ``(N,C,H,W)``."""
        p = self.params if params is None else params
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"expected input (N,{self.spec.input_shape}), got {x.shape}")
        maps: dict[str, Tensor] = {}
        h = x
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                h = T.conv2d(h, p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"], layer.stride, layer.padding)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "maxpool":
                h = T.maxpool2x2(h)
            elif layer.kind == "flatten":
                h = T.reshape(h, (h.shape[0], -1))
            elif layer.kind == "dense":
                h = T.dense(h, p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"])
            if i in self._capture_after:
                maps[self._capture_after[i]] = h
        return ForwardResult(h, maps)

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        for start in range(0, len(images), batch_size):
            out.append(self.forward(Tensor(images[start : start + batch_size])).logits.data)
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), np.float32)

    def classify(self, image: np.ndarray) -> int:
        return int(self.logits(np.asarray(image)[None])[0].argmax())

    def neuron_activations(self, maps: dict[str, np.ndarray]) -> np.ndarray:
        acts = np.zeros(self.num_neurons, dtype=np.float32)
        for name, sl in self.neuron_slices.items():
            acts[sl] = maps[name].mean(axis=(-2, -1))
        return acts


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith("/bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Model(spec, params)


def predict_with_capture(
    model: Model, image, capture: bool = True, target_class: int | None = None, top_k: int = 5
) -> tuple[Prediction, ActivationCapture]:
    """Classify one ``(C,H,W)`` image, optionally capturing conv maps and gradients.

    Gradients are of the pre-softmax logit of ``target_class`` (default: the
    predicted class) with respect to each captured feature map.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if tuple(arr.shape) != tuple(model.spec.input_shape):
        raise DimensionError(f"image shape {arr.shape} != model input {model.spec.input_shape}")
    x = Tensor(arr[None])
    tape = Tape()
    with tape:
        if capture:
            tape.watch(x)
        result = model.forward(x)
    logits = result.logits.data[0]
    probs = T.softmax(logits.astype(np.float64))
    label = int(probs.argmax())
    order = np.argsort(-probs, kind="stable")[:top_k]
    pred = Prediction(probs, label, [(int(i), float(probs[i])) for i in order])
    if not capture:
        return pred, ActivationCapture()
    target = label if target_class is None else int(target_class)
    if not 0 <= target < model.spec.num_classes:
        raise TargetIndexError(f"target class {target} outside [0, {model.spec.num_classes})")
    seed = np.zeros(result.logits.shape, dtype=result.logits.dtype)
    seed[0, target] = 1
    names = list(result.feature_maps)
    grads = tape.gradient(result.logits, [result.feature_maps[n] for n in names], upstream=seed)
    maps = {n: result.feature_maps[n].data[0] for n in names}
    cap = ActivationCapture(
        feature_maps=maps,
        gradients={n: g[0] for n, g in zip(names, grads)},
        neurons=model.neuron_activations(maps),
        layer_slices=dict(model.neuron_slices),
        target_class=target,
    )
    return pred, cap


def capture_neurons(model: Model, image) -> ActivationCapture:
    """Forward-only capture of feature maps and neuron activations (no gradients)."""
    res = model.forward(Tensor(np.asarray(image, dtype=np.float32)[None]))
    maps = {n: t.data[0] for n, t in res.feature_maps.items()}
    return ActivationCapture(feature_maps=maps, neurons=model.neuron_activations(maps),
                             layer_slices=dict(model.neuron_slices))


# --------------------------------------------------------------------------- training


@dataclass
class TrainReport:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    epoch_losses: list[float]
    train_accuracy: float
    test_accuracy: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        raise DataError("cannot evaluate accuracy on an empty set")
    pred = model.logits(images).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 5,
    batch_size: int = 32,
    learning_rate: float = 0.05,
    seed: int = 0,
    test: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Model, TrainReport]:
    """Plain minibatch SGD on softmax cross-entropy. Returns a new model."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("training set is empty")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= model.spec.num_classes:
        raise DataError(f"labels must lie in [0, {model.spec.num_classes})")
    if epochs < 0 or batch_size < 1 or learning_rate < 0:
        raise ConfigurationError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    weights = {n: model.params[n].data.copy() for n in names}
    lr = np.float32(learning_rate)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        running = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            params = {n: Tensor(weights[n]) for n in names}
            x = Tensor(images[idx])
            with Tape() as tape:
                tape.watch(*params.values())
                loss = T.softmax_cross_entropy(model.forward(x, params).logits, labels[idx])
            grads = tape.gradient(loss, [params[n] for n in names])
            for n, g in zip(names, grads):
                weights[n] -= lr * g
            running += float(loss.item()) * len(idx)
        losses.append(running / len(images))
        logger.info("epoch %d/%d loss %.4f", epoch + 1, epochs, losses[-1])
    trained = Model(model.spec, weights, model.metadata)
    report = TrainReport(
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=float(learning_rate),
        seed=seed,
        epoch_losses=losses,
        train_accuracy=accuracy(trained, images, labels),
        test_accuracy=accuracy(trained, *test) if test is not None else None,
    )
    trained.metadata.update(training=report.to_dict())
    return trained, report
