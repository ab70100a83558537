"""Network composition: layer specs, parameter init, training steps.

A network is split at the first dense layer into a convolutional part and a
head. ``train_step`` is deliberately written as the composition of the same
three primitives the distributed trainer uses (forward_features ->
head_train_step -> conv_grads -> apply_conv_update), so a single-worker
synchronous distributed run reproduces it bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Conv, Dense, Layer, MaxPool, Relu, ShapeError, softmax_xent
from .optim import AdaGradState, adagrad_update


@dataclass
class LayerSpec:
    kind: str  # conv | maxpool | fc | activation | softmax
    params: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_doc(cls, doc: dict) -> "LayerSpec":
        params = {k: v for k, v in doc.items() if k != "kind"}
        return cls(doc["kind"], params)


def conv_spec(in_channels: int, out_channels: int, kernel: int = 5, stride: int = 1, pad: int = 2):
    return LayerSpec(
        "conv",
        {
            "in_channels": in_channels,
            "out_channels": out_channels,
            "kernel": kernel,
            "stride": stride,
            "pad": pad,
        },
    )


def maxpool_spec(window: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", {"window": window, "stride": stride})


def fc_spec(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("fc", {"in_dim": in_dim, "out_dim": out_dim})


def relu_spec() -> LayerSpec:
    return LayerSpec("activation", {"fn": "relu"})


def softmax_spec() -> LayerSpec:
    return LayerSpec("softmax")


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer | None:
    """Instantiate one spec; softmax is a marker handled by the loss."""
    p = spec.params
    if spec.kind == "conv":
        k, ci, co = p["kernel"], p["in_channels"], p["out_channels"]
        w = _glorot(rng, (co, ci, k, k), ci * k * k, co * k * k)
        b = np.zeros(co, dtype=np.float32)
        return Conv(w, b, stride=p["stride"], pad=p["pad"])
    if spec.kind == "maxpool":
        return MaxPool(p["window"], p["stride"])
    if spec.kind == "fc":
        w = _glorot(rng, (p["out_dim"], p["in_dim"]), p["in_dim"], p["out_dim"])
        b = np.zeros(p["out_dim"], dtype=np.float32)
        return Dense(w, b)
    if spec.kind == "activation":
        if p.get("fn", "relu") != "relu":
            raise ValueError(f"unsupported activation {p['fn']!r}")
        return Relu()
    if spec.kind == "softmax":
        return None
    raise ValueError(f"unknown layer kind {spec.kind!r}")


class Network:
    """An ordered layer stack with per-parameter AdaGrad state."""

    def __init__(
        self,
        specs: list[LayerSpec],
        layers: list[Layer],
        input_shape: tuple,
        alpha: float = 0.01,
        beta: float = 1.0,
    ):
        if any(s.kind == "softmax" for s in specs[:-1]):
            raise ShapeError("softmax must be the final layer")
        self.specs = specs
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.alpha = alpha
        self.beta = beta
        self.shape_trace = self._validate_shapes()
        self.opt_states: dict[str, AdaGradState] = {
            key: AdaGradState(alpha, beta) for key, _ in self._named_params()
        }

    @classmethod
    def from_specs(
        cls,
        specs: list[LayerSpec],
        input_shape: tuple,
        seed: int = 0,
        alpha: float = 0.01,
        beta: float = 1.0,
    ) -> "Network":
        rng = np.random.default_rng(seed)
        layers = [lay for s in specs if (lay := _build_layer(s, rng)) is not None]
        return cls(specs, layers, input_shape, alpha, beta)

    def _validate_shapes(self) -> list[tuple[str, tuple]]:
        trace = [("input", self.input_shape)]
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            trace.append((type(layer).__name__.lower(), shape))
        return trace

    def _named_params(self):
        for i, layer in enumerate(self.layers):
            for name in layer.param_names():
                yield f"{i}:{name}", layer.params[name]

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self._named_params())

    # -- split at the first dense layer --------------------------------------

    @property
    def cut(self) -> int:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                return i
        return len(self.layers)

    def conv_param_arrays(self) -> dict[str, np.ndarray]:
        cut = self.cut
        return {
            key: arr for key, arr in self._named_params() if int(key.split(":")[0]) < cut
        }

    def load_conv_params(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.conv_param_arrays()
        if set(arrays) != set(own):
            raise ShapeError(f"conv parameter keys {sorted(arrays)} != {sorted(own)}")
        for key, arr in arrays.items():
            i, name = key.split(":")
            target = self.layers[int(i)].params[name]
            if arr.shape != target.shape:
                raise ShapeError(f"{key}: shape {arr.shape} != {target.shape}")
            self.layers[int(i)].params[name] = arr.astype(np.float32, copy=True)

    # -- inference ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def predict(self, x: np.ndarray):
        logits = self.forward(x)
        labels = np.argmax(logits, axis=-1)
        return int(labels) if logits.ndim == 1 else labels

    def loss(self, x: np.ndarray, labels) -> float:
        value, _ = softmax_xent(self.forward(x), labels)
        return value

    # -- training primitives ---------------------------------------------------

    def forward_features(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers[: self.cut]:
            x = layer.forward(x)
        return x

    def head_train_step(self, feats: np.ndarray, labels) -> tuple[float, np.ndarray]:
        """Head forward + loss, then backward and AdaGrad-update head params.
        Returns (loss, gradient w.r.t. feats)."""
        cut = self.cut
        x = feats
        for layer in self.layers[cut:]:
            x = layer.forward(x)
        loss, dy = softmax_xent(x, labels)
        for i in range(len(self.layers) - 1, cut - 1, -1):
            dy = self.layers[i].backward(dy)
            self._update_layer(i)
        return loss, dy

    def conv_grads(self, dfeats: np.ndarray) -> dict[str, np.ndarray]:
        """Backward through the conv part; returns gradients, no update."""
        dy = dfeats
        grads: dict[str, np.ndarray] = {}
        for i in range(self.cut - 1, -1, -1):
            dy = self.layers[i].backward(dy)
            for name in self.layers[i].param_names():
                grads[f"{i}:{name}"] = self.layers[i].grads[name]
        return grads

    def apply_conv_update(self, grads: dict[str, np.ndarray]) -> None:
        for i in range(self.cut):
            layer = self.layers[i]
            for name in layer.param_names():
                key = f"{i}:{name}"
                layer.params[name] = adagrad_update(
                    layer.params[name], grads[key], self.opt_states[key]
                )

    def _update_layer(self, i: int) -> None:
        layer = self.layers[i]
        for name in layer.param_names():
            key = f"{i}:{name}"
            layer.params[name] = adagrad_update(
                layer.params[name], layer.grads[name], self.opt_states[key]
            )

    def train_step(self, x: np.ndarray, labels) -> float:
        """One mini-batch step: mean loss, backward, one AdaGrad update per
        parameter tensor. Composed from the distributed-training primitives."""
        feats = self.forward_features(x)
        loss, dfeats = self.head_train_step(feats, labels)
        grads = self.conv_grads(dfeats)
        self.apply_conv_update(grads)
        return loss


def cifar_cnn(seed: int = 0, alpha: float = 0.01, beta: float = 1.0) -> Network:
    """Three conv blocks (16/20/20 filters, 5x5, same padding, 2x2 pooling)
    and a 320->10 dense head for 3x32x32 inputs."""
    specs = [
        conv_spec(3, 16),
        relu_spec(),
        maxpool_spec(),
        conv_spec(16, 20),
        relu_spec(),
        maxpool_spec(),
        conv_spec(20, 20),
        relu_spec(),
        maxpool_spec(),
        fc_spec(320, 10),
        softmax_spec(),
    ]
    return Network.from_specs(specs, (3, 32, 32), seed=seed, alpha=alpha, beta=beta)
