"""Differentiable layers with explicit forward/backward passes.

Every layer keeps its trainable tensors in ``params`` and, after ``backward``,
the matching gradients in ``grads`` (same keys). Activations for images use
NHWC layout.
"""

from __future__ import annotations

import json
import math
import os
from typing import Iterator, Sequence

import numpy as np

from spheremetric.errors import ContractError
from spheremetric.numerics import DTYPE, Rng, draw_normal

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def he_initialize(rng: Rng, fan_in: int, shape) -> np.ndarray:
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    return draw_normal(rng, shape, 0.0, math.sqrt(2.0 / fan_in))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None
        self._cache_training = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def _store(self, training, *items):
        self._cache = items
        self._cache_training = training

    def _load(self):
        if self._cache is None:
            raise ContractError(f"{self.kind}: backward called before forward")
        return self._cache

    def config(self) -> dict:
        return {"kind": self.kind}

    def state(self) -> dict[str, np.ndarray]:
        """Tensors that are saved in a checkpoint: parameters plus buffers."""
        return dict(self.params)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, value in tensors.items():
            target = self.params if name in self.params else self.__dict__
            if name not in target:
                raise ContractError(f"{self.kind}: unknown tensor {name!r}")
            if target[name].shape != value.shape:
                raise ContractError(
                    f"{self.kind}.{name}: shape {value.shape} != expected {target[name].shape}"
                )
            target[name] = np.array(value, dtype=DTYPE)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng: Rng | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias
        rng = rng or Rng(0)
        self.params["W"] = he_initialize(rng, in_features, (in_features, out_features))
        if bias:
            self.params["b"] = np.zeros(out_features, dtype=DTYPE)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ContractError(f"dense expects (N, {self.in_features}) input, got {x.shape}")
        out = x @ self.params["W"]
        if self.bias:
            out = out + self.params["b"]
        self._store(training, x)
        return out

    def backward(self, grad):
        (x,) = self._load()
        self.grads["W"] = x.T @ grad
        if self.bias:
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        self._store(training, mask)
        return x * mask

    def backward(self, grad):
        (mask,) = self._load()
        return grad * mask


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) during training."""

    kind = "dropout"

    def __init__(self, rate: float = 0.2, rng: Rng | None = None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng or Rng(0)

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._store(training, None)
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = keep / (1.0 - self.rate)
        self._store(training, mask)
        return x * mask

    def backward(self, grad):
        (mask,) = self._load()
        return grad if mask is None else grad * mask

    def config(self):
        return {"kind": self.kind, "rate": self.rate}


class BatchNorm(Layer):
    kind = "batch-norm"

    def __init__(self, dim: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(dim, dtype=DTYPE)
        self.params["beta"] = np.zeros(dim, dtype=DTYPE)
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError(f"batch-norm expects (N, {self.dim}) input, got {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            if x.shape[0] < 2:
                raise ContractError("batch-norm in training mode needs at least 2 samples")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._store(training, xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, grad):
        xhat, inv_std = self._load()
        gamma = self.params["gamma"]
        self.grads["gamma"] = (grad * xhat).sum(axis=0)
        self.grads["beta"] = grad.sum(axis=0)
        if not self._cache_training:
            return grad * gamma * inv_std
        n = grad.shape[0]
        gx = grad * gamma
        return inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps, "momentum": self.momentum}

    def state(self):
        return {**self.params, "running_mean": self.running_mean, "running_var": self.running_var}


def global_average_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ContractError(f"global average pool expects (N, H, W, C) input, got {x.shape}")
    return x.mean(axis=(1, 2))


class GlobalAveragePool(Layer):
    kind = "global-average-pool"

    def forward(self, x, training=False):
        out = global_average_pool(x)
        self._store(training, x.shape)
        return out

    def backward(self, grad):
        (shape,) = self._load()
        n, h, w, c = shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), shape).copy()


class DepthwiseSeparableConv(Layer):
    """k x k per-channel convolution followed by a 1 x 1 channel-mixing convolution.

    Padding is symmetric ``k // 2``, so the output size is ``ceil(H / stride)``.
    """

    kind = "depthwise-separable-conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, bias: bool = True, rng: Rng | None = None):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {kernel_size}")
        if stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.bias = bias
        rng = rng or Rng(0)
        k = kernel_size
        self.params["depthwise"] = he_initialize(rng, k * k, (k, k, in_channels))
        self.params["pointwise"] = he_initialize(rng, in_channels, (in_channels, out_channels))
        if bias:
            self.params["depthwise_bias"] = np.zeros(in_channels, dtype=DTYPE)
            self.params["pointwise_bias"] = np.zeros(out_channels, dtype=DTYPE)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _windows(self, xp, ho, wo):
        k, s = self.kernel_size, self.stride
        for a in range(k):
            for b in range(k):
                yield a, b, (slice(None), slice(a, a + s * (ho - 1) + 1, s),
                             slice(b, b + s * (wo - 1) + 1, s), slice(None))

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ContractError(
                f"depthwise-separable conv expects (N, H, W, {self.in_channels}) input, got {x.shape}"
            )
        k, s, p = self.kernel_size, self.stride, self.kernel_size // 2
        n, h, w, c = x.shape
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        kern = self.params["depthwise"]
        depth = np.zeros((n, ho, wo, c), dtype=DTYPE)
        for a, b, win in self._windows(xp, ho, wo):
            depth += xp[win] * kern[a, b]
        if self.bias:
            depth += self.params["depthwise_bias"]
        out = depth @ self.params["pointwise"]
        if self.bias:
            out += self.params["pointwise_bias"]
        self._store(training, xp, depth, x.shape)
        return out

    def backward(self, grad):
        xp, depth, shape = self._load()
        c, co = self.in_channels, self.out_channels
        p = self.kernel_size // 2
        _, ho, wo, _ = depth.shape
        self.grads["pointwise"] = depth.reshape(-1, c).T @ grad.reshape(-1, co)
        gdepth = grad @ self.params["pointwise"].T
        if self.bias:
            self.grads["pointwise_bias"] = grad.sum(axis=(0, 1, 2))
            self.grads["depthwise_bias"] = gdepth.sum(axis=(0, 1, 2))
        kern = self.params["depthwise"]
        gkern = np.zeros_like(kern)
        gxp = np.zeros_like(xp)
        for a, b, win in self._windows(xp, ho, wo):
            gkern[a, b] = (gdepth * xp[win]).sum(axis=(0, 1, 2))
            gxp[win] += gdepth * kern[a, b]
        self.grads["depthwise"] = gkern
        h, w = shape[1], shape[2]
        return gxp[:, p:p + h, p:p + w, :]

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "bias": self.bias}


def dense_apply(layer: Dense, x, training=False):
    return layer.forward(x, training)


def depthwise_separable_apply(layer: DepthwiseSeparableConv, x, training=False):
    return layer.forward(x, training)


def batch_norm_apply(layer: BatchNorm, x, training=False):
    return layer.forward(x, training)


def dropout_apply(layer: Dropout, x, training=False):
    return layer.forward(x, training)


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Dense, ReLU, Dropout, BatchNorm, GlobalAveragePool, DepthwiseSeparableConv)
}


def layer_from_config(cfg: dict, rng: Rng | None = None) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in LAYER_KINDS:
        raise ContractError(f"unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    if cls in (Dense, DepthwiseSeparableConv, Dropout):
        cfg["rng"] = rng
    return cls(**cfg)


class Model:
    """Ordered layer stack ending in a bias-free linear dense layer and batch norm."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.layers) < 2 or not isinstance(self.layers[-1], BatchNorm) \
                or not isinstance(self.layers[-2], Dense):
            raise ContractError("model must end with a dense layer followed by batch norm")
        self.embedding_dim = self.layers[-1].dim
        # shape compatibility, checked with a throwaway inference pass
        self.forward(np.zeros((2, *self.input_shape), dtype=DTYPE))
        for layer in self.layers:
            layer._cache = None

    def forward(self, x, training=False):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ContractError(f"model expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def embed(self, x, batch_size: int = 256) -> np.ndarray:
        if len(x) == 0:
            return np.zeros((0, self.embedding_dim), dtype=DTYPE)
        return np.concatenate(
            [self.forward(x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        )

    def named_parameters(self) -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{i}.{key}", layer, key

    def parameter_count(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.named_parameters())

    def save(self, directory) -> None:
        save_checkpoint(self, directory)


def build_mlp(input_dim: int, hidden: Sequence[int], embedding_dim: int = 256,
              dropout: float = 0.2, rng: Rng | None = None) -> Model:
    """Dense+ReLU backbone, then dense -> dropout -> He-initialized linear dense -> batch norm."""
    rng = rng or Rng(0)
    layers: list[Layer] = []
    width = input_dim
    for h in hidden:
        layers += [Dense(width, h, rng=rng), ReLU()]
        width = h
    layers += _output_network(width, embedding_dim, dropout, rng)
    return Model(layers, (input_dim,))


def build_convnet(input_shape: Sequence[int], channels: Sequence[int], embedding_dim: int = 256,
                  dropout: float = 0.2, kernel_size: int = 3, rng: Rng | None = None) -> Model:
    """Depthwise-separable conv blocks (stride 2 after the first) with GAP, then the output network."""
    if not 1 <= len(channels) <= 4:
        raise ContractError("convolutional backbone takes 1 to 4 blocks")
    rng = rng or Rng(0)
    layers: list[Layer] = []
    c = input_shape[-1]
    for i, co in enumerate(channels):
        layers += [DepthwiseSeparableConv(c, co, kernel_size, stride=1 if i == 0 else 2, rng=rng), ReLU()]
        c = co
    layers.append(GlobalAveragePool())
    layers += _output_network(c, embedding_dim, dropout, rng)
    return Model(layers, input_shape)


def _output_network(width, embedding_dim, dropout, rng):
    return [
        Dense(width, embedding_dim, rng=rng),
        ReLU(),
        Dropout(dropout, rng=rng.child(1)),
        Dense(embedding_dim, embedding_dim, bias=False, rng=rng),
        BatchNorm(embedding_dim),
    ]


def save_checkpoint(model: Model, directory, extra: dict | None = None) -> None:
    """Write ``manifest.json`` plus one little-endian float64 blob per named tensor."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, layer in enumerate(model.layers):
        tensors = {}
        for name, value in layer.state().items():
            fname = f"{i:02d}_{name}.f64"
            value.astype("<f8").tofile(os.path.join(directory, fname))
            tensors[name] = {"file": fname, "shape": list(value.shape)}
        entries.append({"config": layer.config(), "tensors": tensors})
    manifest = {"input_shape": list(model.input_shape), "embedding_dim": model.embedding_dim,
                "layers": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory) -> tuple[Model, dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    layers = []
    for entry in manifest["layers"]:
        layer = layer_from_config(entry["config"])
        tensors = {}
        for name, meta in entry["tensors"].items():
            path = os.path.join(directory, meta["file"])
            data = np.fromfile(path, dtype="<f8")
            shape = tuple(meta["shape"])
            if data.size != int(np.prod(shape)):
                raise ContractError(f"{path}: holds {data.size} values, manifest declares {shape}")
            tensors[name] = data.reshape(shape)
        layer.load_state(tensors)
        layers.append(layer)
    return Model(layers, manifest["input_shape"]), manifest
