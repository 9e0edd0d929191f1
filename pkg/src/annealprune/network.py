"""Layers, forward/backward propagation and the parameter registry.

Activations are NHWC batches.  Parameters are addressed as
``(layer_index, name)`` with names ``"W"`` and ``"b"``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .tensor import (DEFAULT_DTYPE, DimensionError, NumericError, Rng, col2im,
                     conv2d_forward, im2col, maxpool2x2, maxpool2x2_backward)

LAYER_KINDS = ("conv2d", "maxpool2x2", "flatten", "dense", "relu", "softmax", "dropout")
PROB_FLOOR = 1e-12


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    padding: str | None = None
    units: int | None = None
    q: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if not self.filters or self.filters < 1 or self.padding not in ("same", "valid"):
                raise ValueError(f"conv2d needs filters >= 1 and padding same|valid: {self}")
        if self.kind == "dense" and (not self.units or self.units < 1):
            raise ValueError(f"dense needs units >= 1: {self}")
        if self.kind == "dropout" and (self.q is None or not 0.0 <= self.q < 1.0):
            raise ValueError(f"dropout fraction must lie in [0, 1), got {self.q}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(filters: int, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, padding=padding)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def dropout(q: float) -> LayerSpec:
    return LayerSpec("dropout", q=q)


POOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")
RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


def output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Per-sample output shape of ``spec`` given its per-sample input shape."""
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise DimensionError(f"conv2d needs an HxWxC input, got {shape}")
        h, w, _ = shape
        if spec.padding == "valid":
            h, w = h - 2, w - 2
        if h < 1 or w < 1:
            raise DimensionError(f"valid conv2d shrinks {shape} to nothing")
        return (h, w, spec.filters)
    if spec.kind == "maxpool2x2":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise DimensionError(f"maxpool2x2 needs an HxWxC input with h, w >= 2, got {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise DimensionError(f"dense needs a flat input, got {shape}; add a flatten layer")
        return (spec.units,)
    return tuple(shape)


def param_shapes(spec: LayerSpec, shape: tuple) -> dict[str, tuple]:
    if spec.kind == "conv2d":
        return {"W": (spec.filters, 3, 3, shape[2]), "b": (spec.filters,)}
    if spec.kind == "dense":
        return {"W": (shape[0], spec.units), "b": (spec.units,)}
    return {}


def glorot_uniform(shape: tuple, rng: Rng, dtype) -> np.ndarray:
    if len(shape) == 4:  # (F, 3, 3, C)
        fan_in, fan_out = 9 * shape[3], 9 * shape[0]
    else:
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class LossReport:
    loss: float
    correct: int


class ForwardCache(NamedTuple):
    inputs: list          # input to each layer
    aux: list             # per-layer extras (im2col columns, argmax, dropout mask)
    probabilities: np.ndarray


class Network:
    """Ordered layer stack with a ``(layer_index, name)`` parameter registry."""

    def __init__(self, input_shape, specs, rng: Rng | None = None, dtype=DEFAULT_DTYPE):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.dtype = np.dtype(dtype)
        if not self.specs or self.specs[-1].kind != "softmax":
            raise ValueError("the last layer must be softmax")
        rng = rng if rng is not None else Rng(0)
        self.shapes = [self.input_shape]
        self.params: dict[tuple[int, str], np.ndarray] = {}
        for i, spec in enumerate(self.specs):
            shape = self.shapes[-1]
            for name, pshape in param_shapes(spec, shape).items():
                if name == "W":
                    value = glorot_uniform(pshape, rng.derive(i), self.dtype)
                else:
                    value = np.zeros(pshape, dtype=self.dtype)
                self.params[(i, name)] = value
            self.shapes.append(output_shape(spec, shape))
        self.grads: dict[tuple[int, str], np.ndarray] = {}
        # (layer, name) -> boolean array; True entries are held at exactly zero
        self.frozen: dict[tuple[int, str], np.ndarray] = {}

    # -- registry -------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def layer_params(self, index: int) -> list[tuple[int, str]]:
        return [key for key in self.params if key[0] == index]

    def layer_param_count(self, index: int) -> int:
        return sum(self.params[k].size for k in self.layer_params(index))

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def dense_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind == "dense"]

    def parameter_table(self) -> list[tuple[int, str, int]]:
        """(index, kind, count) for every conv, pool and dense layer."""
        return [(i, s.kind, self.layer_param_count(i)) for i, s in enumerate(self.specs)
                if s.kind in ("conv2d", "maxpool2x2", "dense")]

    def freeze(self, key: tuple[int, str], mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.params[key].shape:
            raise DimensionError(f"freeze mask {mask.shape} does not match {self.params[key].shape}")
        self.frozen[key] = mask.copy()
        self.params[key][mask] = 0

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    # -- propagation ----------------------------------------------------
    def forward(self, batch, mode: str = "eval", rng: Rng | None = None):
        return forward(self, batch, mode, rng)

    def backward(self, cache: ForwardCache, labels) -> LossReport:
        return backward(self, cache, labels)

    def predict(self, batch, batch_size: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(batch), batch_size):
            _, probs = forward(self, batch[start:start + batch_size], "eval")
            out.append(probs)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), self.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels) -> LossReport:
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
    correct = int(np.sum(probs.argmax(axis=1) == labels))
    return LossReport(loss, correct)


def dropout_forward(x: np.ndarray, q: float, rng: Rng | None, mode: str = "train",
                    return_mask: bool = False):
    """Inverted dropout: zero with probability q, scale survivors by 1/(1-q)."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"dropout fraction must lie in [0, 1), got {q}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or q == 0.0:
        out = x.copy()
        mask = None
    else:
        if rng is None:
            raise StateError("train-mode dropout needs an Rng")
        keep = rng.generator.random(x.shape) >= q
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - q)
        out = x * mask
    return (out, mask) if return_mask else out


def layer_forward(spec: LayerSpec, params: dict, x: np.ndarray, mode: str, rng: Rng | None):
    """Forward one layer on a batch; returns (output, aux-for-backward)."""
    kind = spec.kind
    if kind == "conv2d":
        cols = im2col(x, spec.padding)
        W = params["W"]
        return cols @ W.reshape(W.shape[0], -1).T + params["b"], cols
    if kind == "maxpool2x2":
        return maxpool2x2(x)
    if kind == "flatten":
        return x.reshape(len(x), -1), None
    if kind == "dense":
        return x @ params["W"] + params["b"], None
    if kind == "relu":
        return np.maximum(x, 0), None
    if kind == "softmax":
        return softmax(x), None
    if kind == "dropout":
        return dropout_forward(x, spec.q, rng, mode, return_mask=True)
    raise ValueError(kind)


def layer_backward(spec: LayerSpec, params: dict, x: np.ndarray, aux, y: np.ndarray,
                   grad_out: np.ndarray):
    """Backward one layer; returns (grad wrt input, {param name: grad})."""
    kind = spec.kind
    if kind == "conv2d":
        W = params["W"]
        g2 = grad_out.reshape(-1, W.shape[0])
        cols = aux.reshape(len(g2), -1)
        grads = {"W": (g2.T @ cols).reshape(W.shape), "b": g2.sum(axis=0)}
        gcols = (g2 @ W.reshape(W.shape[0], -1)).reshape(aux.shape)
        return col2im(gcols, x.shape, spec.padding), grads
    if kind == "maxpool2x2":
        return maxpool2x2_backward(grad_out, aux, x.shape), {}
    if kind == "flatten":
        return grad_out.reshape(x.shape), {}
    if kind == "dense":
        grads = {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}
        return grad_out @ params["W"].T, grads
    if kind == "relu":
        return grad_out * (x > 0), {}
    if kind == "softmax":
        return y * (grad_out - np.sum(grad_out * y, axis=1, keepdims=True)), {}
    if kind == "dropout":
        return (grad_out if aux is None else grad_out * aux), {}
    raise ValueError(kind)


def _layer_params(net: Network, i: int) -> dict:
    return {name: net.params[(i, name)] for (_, name) in net.layer_params(i)}


def forward(net: Network, batch, mode: str = "eval", rng: Rng | None = None):
    """Run the stack; returns ``(cache, probabilities)``.

    Dropout layers draw from ``rng`` in train mode and pass through in eval mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch)
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"batch shape {x.shape[1:]} does not match network input {net.input_shape}")
    x = x.astype(net.dtype, copy=False)
    inputs, aux = [], []
    for i, spec in enumerate(net.specs):
        inputs.append(x)
        x, extra = layer_forward(spec, _layer_params(net, i), x, mode, rng)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation in layer {i} ({spec.kind})")
        aux.append(extra)
    return ForwardCache(inputs, aux, x), x


def backward(net: Network, cache: ForwardCache | None, labels) -> LossReport:
    """Fill ``net.grads`` with d(mean cross-entropy)/d(param); returns the loss."""
    if cache is None:
        raise StateError("backward called without a forward cache")
    labels = np.asarray(labels)
    probs = cache.probabilities
    if labels.shape != (len(probs),):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {len(probs)}")
    if labels.size and (labels.min() < 0 or labels.max() >= net.num_classes):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    report = cross_entropy(probs, labels)
    # fused softmax + cross-entropy
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1
    grad /= len(labels)
    grads = {}
    for i in range(len(net.specs) - 2, -1, -1):
        spec = net.specs[i]
        y = cache.inputs[i + 1]
        grad, pgrads = layer_backward(spec, _layer_params(net, i), cache.inputs[i],
                                      cache.aux[i], y, grad)
        for name, g in pgrads.items():
            grads[(i, name)] = g.astype(net.dtype, copy=False)
    net.grads = grads
    return report


def sgd_step(net: Network, lr: float):
    """``w <- w - lr * grad`` for every parameter, then clear gradients.

    Frozen entries get their gradient discarded and are re-zeroed.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not net.grads or set(net.grads) != set(net.params):
        raise StateError("sgd_step needs a gradient for every parameter; run backward first")
    for key, p in net.params.items():
        g = net.grads[key]
        frozen = net.frozen.get(key)
        if frozen is not None:
            g = np.where(frozen, 0, g)
        p -= net.dtype.type(lr) * g
        if frozen is not None:
            p[frozen] = 0
    net.grads = {}


def baseline_cnn_specs(dropout_q: float | None = None) -> list[LayerSpec]:
    specs = [conv(32, "same"), RELU, conv(32, "valid"), RELU, POOL,
             conv(64, "same"), RELU, conv(64, "valid"), RELU, POOL, FLATTEN]
    if dropout_q is not None:
        specs.append(dropout(dropout_q))
    specs += [dense(512), RELU, dense(10), SOFTMAX]
    return specs


def build_baseline_cnn(rng: Rng | None = None, dropout_q: float | None = None,
                       dtype=DEFAULT_DTYPE) -> Network:
    """The 32x32x3 CIFAR-10 network with 1,250,858 parameters."""
    return Network((32, 32, 3), baseline_cnn_specs(dropout_q), rng, dtype)


def mlp_specs(hidden, classes: int, dropout_q: float | None = None) -> list[LayerSpec]:
    specs = [FLATTEN]
    if dropout_q is not None:
        specs.append(dropout(dropout_q))
    for units in hidden:
        specs += [dense(units), RELU]
    specs += [dense(classes), SOFTMAX]
    return specs


def build_mlp(input_shape, hidden=(512,), classes: int = 10, rng: Rng | None = None,
              dropout_q: float | None = None, dtype=DEFAULT_DTYPE) -> Network:
    return Network(input_shape, mlp_specs(hidden, classes, dropout_q), rng, dtype)
