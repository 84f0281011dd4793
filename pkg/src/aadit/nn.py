"""Dense feedforward substrate: parameter blocks, layer stacks, softmax
cross-entropy, plain SGD and a central-difference gradient oracle.

All arrays are float64 with frames laid out as columns, i.e. an input batch
of N frames of dimension d is a ``(d, N)`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, InternalError, NumericalError

ACTIVATIONS = ("tanh", "identity")


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ConfigError(f"parameter {self.name!r} must be 2-D, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class Layer:
    weights: ParamBlock
    bias: ParamBlock
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


class FeedForwardStack:
    """Ordered list of affine layers, each followed by tanh or identity."""

    def __init__(self, layers: Sequence[Layer], name: str = "stack"):
        if not layers:
            raise ConfigError(f"{name}: a stack needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].out_dim != layers[i].in_dim:
                raise ConfigError(
                    f"{name}: layer {i - 1} emits {layers[i - 1].out_dim} units "
                    f"but layer {i} expects {layers[i].in_dim}"
                )
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"{name}: layer {i} has unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim, 1):
                raise ConfigError(f"{name}: layer {i} bias shape {layer.bias.shape} != ({layer.out_dim}, 1)")
        self.layers = list(layers)
        self.name = name

    @classmethod
    def build(cls, dims: Sequence[int], rng: np.random.Generator, name: str,
              final_activation: str = "identity") -> "FeedForwardStack":
        """Glorot-initialised stack with tanh hidden layers; ``dims`` = [in, h1, ..., out]."""
        if len(dims) < 2:
            raise ConfigError(f"{name}: need at least input and output dims, got {list(dims)}")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = final_activation if i == len(dims) - 2 else "tanh"
            layers.append(Layer(
                ParamBlock(f"{name}.{i}.W", glorot_uniform(rng, d_out, d_in)),
                ParamBlock(f"{name}.{i}.b", np.zeros((d_out, 1))),
                act,
            ))
        return cls(layers, name)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[ParamBlock]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_dim for layer in self.layers]
        return f"FeedForwardStack({self.name!r}, dims={dims})"


@dataclass
class ForwardCache:
    stack: FeedForwardStack
    inputs: list
    outputs: list

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[1]


def stack_forward(stack: FeedForwardStack, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"{stack.name}: input must be 2-D (dim x N), got shape {x.shape}")
    inputs, outputs = [], []
    h = x
    for i, layer in enumerate(stack.layers):
        if h.shape[0] != layer.in_dim:
            raise ConfigError(
                f"{stack.name}: layer {i} expects {layer.in_dim} input rows, got {h.shape[0]}"
            )
        inputs.append(h)
        z = layer.weights.value @ h + layer.bias.value
        h = np.tanh(z) if layer.activation == "tanh" else z
        outputs.append(h)
    return h, ForwardCache(stack, inputs, outputs)


def stack_backward(stack: FeedForwardStack, cache: ForwardCache, grad_output: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into ``.grad`` and return dL/d(input)."""
    if cache is None or cache.stack is not stack or len(cache.inputs) != len(stack.layers):
        raise InternalError(f"{stack.name}: forward cache is missing or belongs to another stack")
    expected = (stack.output_dim, cache.batch_size)
    if grad_output.shape != expected:
        raise InternalError(f"{stack.name}: grad_output shape {grad_output.shape} != {expected}")
    g = grad_output
    for layer, h_in, h_out in zip(reversed(stack.layers), reversed(cache.inputs), reversed(cache.outputs)):
        if layer.activation == "tanh":
            g = g * (1.0 - h_out * h_out)
        layer.weights.grad += g @ h_in.T
        layer.bias.grad += g.sum(axis=1, keepdims=True)
        g = layer.weights.value.T @ g
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Column-wise softmax with max subtraction."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the N columns of ``logits`` and its gradient."""
    labels = np.asarray(labels)
    k, n = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise InputError("softmax_xent needs at least one column")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    cols = np.arange(n)
    z = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    loss = float(np.mean(log_norm - z[labels, cols]))
    grad = np.exp(z - log_norm)
    grad[labels, cols] -= 1.0
    grad /= n
    return loss, grad


def zero_grads(params: Iterable[ParamBlock]):
    for p in params:
        p.zero_grad()


def sgd_step(params: Sequence[ParamBlock], lr: float):
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise NumericalError(f"non-finite gradient in {p.name!r} ({bad} entries); step aborted")
    for p in params:
        p.value -= lr * p.grad
        p.zero_grad()


def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[ParamBlock], h: float = 1e-5):
    """Central-difference estimate of d loss_fn / d param for every entry.

    ``loss_fn`` takes no arguments and reads the current parameter values;
    each entry is perturbed in place and restored afterwards.
    """
    estimates = []
    for p in params:
        est = np.zeros_like(p.value)
        flat = p.value.flat
        for i in range(p.value.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            est.flat[i] = (up - down) / (2.0 * h)
        estimates.append(est)
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max magnitude."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale < floor:
        return diff
    return diff / scale
