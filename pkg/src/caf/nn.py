"""Small differentiable building blocks on numpy, float64 throughout.

Layers work on batches shaped ``(batch, features)`` (a single vector is
accepted too) and carry their own backward rule; there is no graph
machinery. Parameters are plain ndarrays updated in place, addressed by
dotted names such as ``"extractor.0.weight"``.
"""
from __future__ import annotations

import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from caf.rng import Stream


def _glorot(stream: Stream, out_dim: int, in_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return (2.0 * stream.uniform((out_dim, in_dim)) - 1.0) * limit


def _as_batch(x, in_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != in_dim:
        raise ValueError(f"expected input of width {in_dim}, got shape {x.shape}")
    return x


class Dense:
    kind = "dense"

    def __init__(self, weight, bias):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite parameter")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, stream: Stream) -> "Dense":
        return cls(_glorot(stream, out_dim, in_dim), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x) -> np.ndarray:
        return _as_batch(x, self.in_dim) @ self.weight.T + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return ``(grad_input, {param: grad})``; gradients are summed over the batch."""
        x2 = np.atleast_2d(x)
        g2 = np.atleast_2d(grad_out)
        grads = {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}
        return (grad_out @ self.weight), grads


class LowRankDense:
    """Bias-free dense map whose weight is the product ``factor_b @ factor_a``."""

    kind = "lowrank"

    def __init__(self, factor_b, factor_a):
        self.factor_b = np.array(factor_b, dtype=np.float64)
        self.factor_a = np.array(factor_a, dtype=np.float64)
        if self.factor_b.ndim != 2 or self.factor_a.ndim != 2:
            raise ValueError("low-rank factors must be matrices")
        if self.factor_b.shape[1] != self.factor_a.shape[0]:
            raise ValueError(f"factor shapes {self.factor_b.shape} x {self.factor_a.shape} do not chain")
        if self.rank > min(self.in_dim, self.out_dim):
            raise ValueError(f"rank {self.rank} exceeds min(in={self.in_dim}, out={self.out_dim})")
        if not (np.all(np.isfinite(self.factor_b)) and np.all(np.isfinite(self.factor_a))):
            raise ValueError("non-finite parameter")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rank: int, stream: Stream) -> "LowRankDense":
        # B starts at zero so the layer is initially the zero map
        return cls(np.zeros((out_dim, rank)), _glorot(stream, rank, in_dim))

    @property
    def rank(self) -> int:
        return self.factor_a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.factor_a.shape[1]

    @property
    def out_dim(self) -> int:
        return self.factor_b.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"factor_b": self.factor_b, "factor_a": self.factor_a}

    def forward(self, x) -> np.ndarray:
        return (_as_batch(x, self.in_dim) @ self.factor_a.T) @ self.factor_b.T

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        x2 = np.atleast_2d(x)
        g2 = np.atleast_2d(grad_out)
        h = x2 @ self.factor_a.T
        grad_h = g2 @ self.factor_b
        grads = {"factor_b": g2.T @ h, "factor_a": grad_h.T @ x2}
        grad_in = grad_h @ self.factor_a
        return (grad_in if np.ndim(grad_out) > 1 else grad_in[0]), grads


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(pre: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (pre > 0.0)


def dense_forward(layer: Dense, x) -> np.ndarray:
    return layer.forward(x)


def lowrank_forward(layer: LowRankDense, x) -> np.ndarray:
    return layer.forward(x)


class Mlp:
    """Layers applied in order with ReLU between consecutive layers (none after the last)."""

    def __init__(self, layers: Sequence[Dense | LowRankDense]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)

    @classmethod
    def init(cls, widths: Sequence[int], stream: Stream, rank: int | None = None) -> "Mlp":
        """Dense layers by default; ``rank`` switches every layer to :class:`LowRankDense`."""
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        layers = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            s = stream.child(str(i))
            layers.append(Dense.init(a, b, s) if rank is None else LowRankDense.init(a, b, rank, s))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                yield f"{prefix}{i}.{name}", arr

    def num_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_parameters())

    def forward(self, x, cache: list | None = None) -> np.ndarray:
        """Forward pass; when ``cache`` is a list it receives per-layer inputs for backward."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if cache is not None:
                cache.append(h)
            h = layer.forward(h)
            if i < last:
                if cache is not None:
                    cache.append(h)
                h = relu(h)
        return h

    def backward(self, cache: list, grad_out: np.ndarray, tape: "GradientTape", prefix: str = "",
                 need_input_grad: bool = False) -> np.ndarray | None:
        g = grad_out
        pos = len(cache)
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                pos -= 1
                g = relu_backward(cache[pos], g)
            pos -= 1
            layer_input = cache[pos]
            grad_in, grads = self.layers[i].backward(layer_input, g)
            for name, arr in grads.items():
                tape.add(f"{prefix}{i}.{name}", arr)
            if i == 0 and not need_input_grad:
                return None
            g = grad_in
        return g

    def backward_loss(self, x, labels, reduction: str = "mean") -> tuple[float, "GradientTape"]:
        """Cross-entropy loss of the network's logits and the gradient of every parameter."""
        cache: list = []
        logits = self.forward(np.atleast_2d(x), cache)
        loss, grad = softmax_cross_entropy(logits, labels, reduction)
        tape = GradientTape()
        self.backward(cache, grad, tape)
        return loss, tape


def log_softmax(logits: np.ndarray) -> np.ndarray:
    q = np.asarray(logits, dtype=np.float64)
    m = np.max(q, axis=-1, keepdims=True)
    shifted = q - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels, reduction: str = "mean"):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single logit vector and scalar label returns ``(loss, softmax - onehot)``.
    For a batch the loss and gradient are averaged over rows, or summed with
    ``reduction="sum"``.
    """
    q = np.asarray(logits, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(y) != len(q2):
        raise ValueError(f"{len(y)} labels for {len(q2)} logit rows")
    if np.any(y < 0) or np.any(y >= q2.shape[1]):
        raise ValueError(f"label out of range for {q2.shape[1]} classes")
    logp = log_softmax(q2)
    rows = np.arange(len(y))
    losses = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    if reduction == "mean":
        return float(losses.mean()), grad / len(y)
    if reduction == "sum":
        return float(losses.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


class GradientTape:
    """Per-parameter gradient buffers keyed by parameter name."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, grad) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if name in self.grads:
            self.grads[name] = self.grads[name] + grad
        else:
            self.grads[name] = grad.copy()

    def accumulate(self, other: "GradientTape") -> None:
        for name, grad in other.items():
            self.add(name, grad)

    def zero(self) -> None:
        for grad in self.grads.values():
            grad[...] = 0.0

    def items(self):
        return self.grads.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def __len__(self) -> int:
        return len(self.grads)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for g in self.grads.values() if g.size), default=0.0)


def sgd_step(params: Mapping[str, np.ndarray], tape: GradientTape | Mapping, lr: float) -> None:
    """In-place ``p -= lr * grad`` for every gradient on the tape.

    ``params`` must be the trainable parameter set; a gradient for any name
    outside it (a frozen parameter, say) is an error.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr!r}")
    items = list(tape.items())
    for name, grad in items:
        if name not in params:
            raise KeyError(f"gradient for non-trainable parameter {name!r}")
        if np.shape(params[name]) != np.shape(grad):
            raise ValueError(f"shape mismatch for {name}: {np.shape(params[name])} vs {np.shape(grad)}")
    if lr == 0:
        return
    for name, grad in items:
        p = params[name]
        np.subtract(p, lr * np.asarray(grad), out=p)
