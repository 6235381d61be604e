"""Dense-network primitives with hand-written gradients (float64 throughout)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.3
DROPOUT_RATE = 0.2
LOG_FLOOR = 1e-12

ACTIVATIONS = ("leaky_relu", "linear", "softmax")


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got ({fan_in}, {fan_out})")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParameterBuffer:
    """One contiguous float64 vector carved into named array views.

    Optimizers work on ``flat``; layers hold views, so updates are visible
    without copying.
    """

    def __init__(self, shapes: Sequence[tuple[int, ...]]):
        self.shapes = [tuple(s) for s in shapes]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.zeros(int(self.offsets[-1]))
        self.views = [self.view_of(self.flat, i) for i in range(len(self.shapes))]

    def view_of(self, vector: np.ndarray, i: int) -> np.ndarray:
        return vector[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])

    def like(self) -> tuple[np.ndarray, list[np.ndarray]]:
        vec = np.zeros_like(self.flat)
        return vec, [self.view_of(vec, i) for i in range(len(self.shapes))]

    @property
    def size(self) -> int:
        return self.flat.size


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "leaky_relu"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape} / {self.biases.shape}")
        if self.slope <= 0:
            raise ValueError("LeakyReLU slope must be positive")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    if x.shape[1] != layer.fan_in:
        raise ValueError(f"input has {x.shape[1]} columns, layer expects {layer.fan_in}")
    return x @ layer.weights + layer.biases


def leaky_relu(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z >= 0, 1.0, slope)


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns (output, mask) with the 1/(1-rate) scale folded into mask."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(float)
    if np.any(np.isnan(logits)):
        raise ValueError("softmax input contains NaN")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(n_classes)[labels]


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(np.sum(y, axis=-1) == 1)):
        raise ValueError("targets must be one-hot rows")


def as_scalar(value):
    """Python float for float64 results; extended-precision scalars pass through."""
    value = np.asarray(value)
    return float(value) if value.dtype.itemsize <= 8 else value[()]


def cross_entropy(y: np.ndarray, p: np.ndarray) -> float:
    """-sum y log(p + floor); batch-mean for 2-D input."""
    y = np.asarray(y, dtype=float)
    _check_one_hot(y)
    per_row = -np.sum(y * np.log(np.asarray(p) + LOG_FLOOR), axis=-1)
    return as_scalar(np.mean(per_row))


def cross_entropy_grad_logits(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-row gradient of the fused softmax + cross-entropy with respect to the logits."""
    y = np.asarray(y, dtype=float)
    _check_one_hot(y)
    return np.asarray(p) - y


class Mlp:
    """Plain feed-forward classifier: hidden LeakyReLU layers and a softmax output."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 slope: float = LEAKY_SLOPE, dropout_rate: float = 0.0):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.slope = slope
        self.dropout_rate = dropout_rate
        shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            shapes += [(a, b), (b,)]
        self.buffer = ParameterBuffer(shapes)
        self.grad_flat, self.grad_views = self.buffer.like()
        self.layers = []
        n = len(widths) - 1
        for k in range(n):
            w, b = self.buffer.views[2 * k], self.buffer.views[2 * k + 1]
            w[...] = glorot_init(w.shape[0], w.shape[1], rng)
            act = "softmax" if k == n - 1 else "leaky_relu"
            self.layers.append(DenseLayer(w, b, act, slope))

    def parameters(self) -> list[np.ndarray]:
        return self.buffer.views

    def forward(self, x, training=False, rng=None, dtype=float):
        h = np.atleast_2d(np.asarray(x, dtype=dtype))
        cache = []
        for layer in self.layers:
            a = dense_forward(layer, h)
            if layer.activation == "softmax":
                cache.append((h, a, None))
                return softmax(a), cache
            out, mask = dropout(leaky_relu(a, layer.slope), self.dropout_rate, training, rng)
            cache.append((h, a, mask))
            h = out
        raise AssertionError("last layer must be softmax")

    def loss(self, x, y, training=False, rng=None, dtype=float) -> float:
        p, _ = self.forward(x, training, rng, dtype)
        return cross_entropy(one_hot(y), p)

    def loss_and_grads(self, x, y, training=False, rng=None):
        p, cache = self.forward(x, training, rng)
        yh = one_hot(y)
        batch = p.shape[0]
        g = cross_entropy_grad_logits(yh, p) / batch
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h_in, a, mask = cache[k]
            if layer.activation != "softmax":
                g = g * mask * leaky_relu_grad(a, layer.slope)
            self.grad_views[2 * k][...] = h_in.T @ g
            self.grad_views[2 * k + 1][...] = g.sum(axis=0)
            g = g @ layer.weights.T
        return cross_entropy(yh, p), self.grad_views


def grad_check(model, x, y, epsilon: float = 1e-5, training: bool = False,
               loss_kwargs: dict | None = None, indices: dict | None = None,
               precision=np.longdouble) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model`` must expose ``parameters()``, ``loss(x, y, dtype=..., **kw)``
    and ``loss_and_grads(x, y, **kw)``; any stochastic input (latent noise)
    must be frozen through ``loss_kwargs``. The perturbed losses are
    evaluated in ``precision`` so roundoff stays far below the 1e-8 floor of
    the relative error. ``indices`` optionally maps a parameter position to
    the flat entries to probe (spot checks on large models).
    """
    loss_kwargs = dict(loss_kwargs or {})
    if training or loss_kwargs.get("training"):
        raise ValueError("gradient check requires dropout disabled (training=False)")
    _, grads = model.loss_and_grads(x, y, **loss_kwargs)
    analytic = [np.array(g, copy=True) for g in grads]
    worst = 0.0
    for k, (param, ga) in enumerate(zip(model.parameters(), analytic)):
        flat = param.reshape(-1)
        ga = ga.reshape(-1)
        probe = range(flat.size) if indices is None else indices.get(k, ())
        for i in probe:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = flat[i]
            up = model.loss(x, y, dtype=precision, **loss_kwargs)
            flat[i] = orig - epsilon
            lo = flat[i]
            down = model.loss(x, y, dtype=precision, **loss_kwargs)
            flat[i] = orig
            gn = float((up - down) / (precision(hi) - precision(lo)))
            err = abs(ga[i] - gn) / max(abs(ga[i]) + abs(gn), 1e-8)
            worst = max(worst, err)
    return worst
