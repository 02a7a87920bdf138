"""Layer library, reference architectures, initialization and prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError, Tape


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv2D:
    kernel: int
    channels: int
    padding: str = "valid"  # or "same"
    # per-channel learnable gain, a cheap stand-in for batch norm
    scale: bool = False


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Softplus:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5


@dataclass(frozen=True)
class Flatten:
    pass


LAYER_TYPES = {cls.__name__.lower(): cls for cls in (Dense, Conv2D, MaxPool, Relu, Softplus, Dropout, Flatten)}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: ``input_shape`` is (D,) for dense models or (H, W, C) for conv models."""

    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = self.layer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"{self.name}: final output {shapes[-1]} does not match {self.num_classes} classes")

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    def layer_shapes(self) -> list[tuple]:
        """Per-example output shape after each layer (index 0 is the input)."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"layer {i} dense: expects a flat input, got {shape}")
                shape = (layer.units,)
            elif isinstance(layer, Conv2D):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} conv2d: expects (H, W, C), got {shape}")
                h, w, _ = shape
                if layer.padding == "valid":
                    h, w = h - layer.kernel + 1, w - layer.kernel + 1
                elif layer.padding != "same":
                    raise ValueError(f"layer {i} conv2d: unknown padding {layer.padding!r}")
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i} conv2d: kernel {layer.kernel} too large for {shape}")
                shape = (h, w, layer.channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[0] < layer.size or shape[1] < layer.size:
                    raise ShapeError(f"layer {i} maxpool: cannot pool {shape}")
                shape = (shape[0] // layer.size, shape[1] // layer.size, shape[2])
            elif isinstance(layer, Flatten):
                shape = (math.prod(shape),)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ValueError(f"layer {i} dropout: rate {layer.rate} outside [0, 1)")
            elif not isinstance(layer, (Relu, Softplus)):
                raise TypeError(f"layer {i}: unsupported layer {layer!r}")
            out.append(shape)
        return out

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        io = self.layer_shapes()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"dense{i}.W"] = (io[i][0], layer.units)
                shapes[f"dense{i}.b"] = (layer.units,)
            elif isinstance(layer, Conv2D):
                cin = io[i][2]
                shapes[f"conv{i}.W"] = (layer.kernel, layer.kernel, cin, layer.channels)
                shapes[f"conv{i}.b"] = (layer.channels,)
                if layer.scale:
                    shapes[f"conv{i}.scale"] = (layer.channels,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"type": type(l).__name__.lower(), **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["num_classes"]), d.get("name", "model"))


@dataclass
class Params:
    tensors: dict[str, np.ndarray]
    seed: int = 0
    # logits are divided by this at prediction time; 1.0 means raw logits
    eval_temperature: float = 1.0

    def copy(self) -> "Params":
        return Params({k: np.array(v) for k, v in self.tensors.items()}, self.seed, self.eval_temperature)

    def __getitem__(self, name):
        return self.tensors[name]


def desk_mlp(num_classes: int = 10, input_dim: int = 784) -> ModelSpec:
    return ModelSpec(
        (Dense(256), Softplus(), Dense(128), Softplus(), Dense(num_classes)),
        (input_dim,),
        num_classes,
        "desk_mlp",
    )


def desk_cnn(num_classes: int = 10, image_shape=(28, 28, 1)) -> ModelSpec:
    return ModelSpec(
        (
            Conv2D(3, 8), Relu(), MaxPool(2),
            Conv2D(3, 16), Relu(), MaxPool(2),
            Flatten(), Dense(64), Relu(), Dropout(0.5),
            Dense(num_classes),
        ),
        image_shape,
        num_classes,
        "desk_cnn",
    )


def paper_cnn(num_classes: int = 10, image_shape=(28, 28, 1)) -> ModelSpec:
    return ModelSpec(
        (
            Conv2D(5, 32, "same", scale=True), Relu(), MaxPool(2),
            Conv2D(5, 64, "same", scale=True), Relu(), MaxPool(2),
            Flatten(), Dense(1024), Relu(), Dropout(0.5),
            Dense(num_classes),
        ),
        image_shape,
        num_classes,
        "paper_cnn",
    )


ARCHITECTURES = {"desk_mlp": desk_mlp, "desk_cnn": desk_cnn, "paper_cnn": paper_cnn}


def init(spec: ModelSpec, seed: int) -> Params:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit conv scales."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".W"):
            fan_in = math.prod(shape[:-1])
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return Params(tensors, seed)


def sample_dropout_masks(spec: ModelSpec, n: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Inverted-dropout masks keyed by layer index, for a batch of ``n``."""
    shapes = spec.layer_shapes()
    masks = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dropout) and layer.rate > 0:
            keep = rng.random((n,) + shapes[i]) >= layer.rate
            masks[i] = keep / (1.0 - layer.rate)
    return masks


def forward(
    spec: ModelSpec,
    params: Mapping[str, Node],
    x: Node,
    masks: Mapping[int, np.ndarray] | None = None,
    eval_temperature: float = 1.0,
) -> Node:
    """Logits for a flat (N, D) input node; dropout applies only where ``masks`` has an entry."""
    if len(x.shape) != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"{spec.name}: input shape {x.shape} does not match (N, {spec.input_dim})")
    n = x.shape[0]
    h = x if len(spec.input_shape) == 1 else ad.reshape(x, (n,) + spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = ad.bias_add(ad.matmul(h, params[f"dense{i}.W"]), params[f"dense{i}.b"])
        elif isinstance(layer, Conv2D):
            c = h.shape[3]
            k = layer.kernel
            cols = ad.patches(h, k, layer.padding)
            W = ad.reshape(params[f"conv{i}.W"], (k * k * c, layer.channels))
            out = ad.matmul(cols, W)
            if layer.scale:
                out = ad.mul(out, ad.broadcast_axis(params[f"conv{i}.scale"], 0, out.shape[0]))
            out = ad.bias_add(out, params[f"conv{i}.b"])
            oh, ow, _ = spec.layer_shapes()[i + 1]
            h = ad.reshape(out, (n, oh, ow, layer.channels))
        elif isinstance(layer, MaxPool):
            h = ad.maxpool(h, layer.size)
        elif isinstance(layer, Relu):
            h = ad.relu(h)
        elif isinstance(layer, Softplus):
            h = ad.softplus(h)
        elif isinstance(layer, Flatten):
            h = ad.reshape(h, (n, -1))
        elif isinstance(layer, Dropout):
            if masks and i in masks:
                h = ad.mul(h, h.tape.constant(masks[i]))
    if eval_temperature != 1.0:
        h = ad.div(h, h.tape.constant(float(eval_temperature)))
    return h


def bind(tape: Tape, params: Params) -> dict[str, Node]:
    """Register every parameter tensor as a named tape variable."""
    return {name: tape.variable(name, value) for name, value in params.tensors.items()}


def logits(
    spec: ModelSpec,
    params: Params,
    X: np.ndarray,
    train: bool = False,
    dropout_seed: int | None = None,
    tape: Tape | None = None,
) -> Node:
    """Logits on a (fresh) tape with variables ``x`` and one per parameter.

    In train mode dropout masks are drawn from ``dropout_seed`` and recorded as
    constants; eval mode is deterministic.
    """
    tape = tape or Tape()
    x = tape.variable("x", X)
    nodes = bind(tape, params)
    masks = None
    if train:
        masks = sample_dropout_masks(spec, X.shape[0], np.random.default_rng(dropout_seed))
    return forward(spec, nodes, x, masks, params.eval_temperature)


def predict_logits(spec: ModelSpec, params: Params, X: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Eval-mode logits as a plain array, computed in batches."""
    X = np.asarray(X, dtype=np.float64)
    out = []
    for i in range(0, len(X), batch_size):
        z = logits(spec, params, X[i : i + batch_size])
        out.append(z.value)
        z.tape.release()
    if not out:
        return np.zeros((0, spec.num_classes))
    return np.concatenate(out)


def predict_probs(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Temperature softmax of logits, max-subtracted for stability."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    s = np.asarray(z, dtype=np.float64) / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def predict(spec: ModelSpec, params: Params, X: np.ndarray) -> np.ndarray:
    return predict_logits(spec, params, X).argmax(axis=1)


def accuracy(spec: ModelSpec, params: Params, X: np.ndarray, y: np.ndarray) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean(predict(spec, params, X) == np.asarray(y).argmax(axis=1)))


def save_checkpoint(path, spec: ModelSpec, params: Params, extra: Mapping | None = None) -> str:
    """Write spec, seed and every named tensor; returns the file's SHA-256."""
    from . import container

    meta = {
        "kind": "checkpoint",
        "spec": spec.to_dict(),
        "seed": params.seed,
        "eval_temperature": params.eval_temperature,
        "extra": dict(extra or {}),
    }
    return container.save(path, params.tensors, meta)


def load_checkpoint(path) -> tuple[ModelSpec, Params, dict]:
    from . import container

    tensors, meta = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path}: not a model checkpoint")
    spec = ModelSpec.from_dict(meta["spec"])
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise container.ContainerError(f"{path}: tensor {name!r} missing or misshapen")
    params = Params(tensors, int(meta["seed"]), float(meta["eval_temperature"]))
    return spec, params, meta.get("extra", {})
