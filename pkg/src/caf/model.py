"""Frozen extractor + certifying adapters + linear head.

With ``V`` adapters the classifier computes

    logits = head(V * extractor(x) + sum_v adapter_v(x))

which is the latent-sum rule written in its simplified form (the head is
linear, so summing ``V`` copies of ``extractor(x) + adapter_v(x)`` before
the head is the same thing). ``V = 1`` is the single-adapter classifier and
``V = 0`` is the plain pre-trained base classifier ``head(extractor(x))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from caf.nn import Dense, GradientTape, LowRankDense, Mlp, softmax_cross_entropy
from caf.rng import Stream


@dataclass
class Adapter:
    body: Mlp
    trained_sigma: float

    def __post_init__(self):
        if not self.trained_sigma > 0:
            raise ValueError(f"trained_sigma must be positive, got {self.trained_sigma!r}")

    @property
    def kind(self) -> str:
        return "lowrank" if isinstance(self.body.layers[0], LowRankDense) else "mlp"

    @property
    def rank(self) -> int | None:
        return self.body.layers[0].rank if self.kind == "lowrank" else None

    def num_parameters(self) -> int:
        return self.body.num_parameters()

    def __call__(self, x) -> np.ndarray:
        return self.body.forward(x)


def make_adapter(kind: str, widths: Sequence[int], trained_sigma: float, stream: Stream,
                 rank: int | None = None) -> Adapter:
    """Fresh adapter. ``kind="lowrank"`` uses low-rank layers whose output starts at zero."""
    if kind == "mlp":
        body = Mlp.init(widths, stream)
        # zero the last layer so the adapter starts as the zero map
        last = body.layers[-1]
        last.weight[...] = 0.0
        last.bias[...] = 0.0
    elif kind == "lowrank":
        if rank is None:
            raise ValueError("a lowrank adapter needs a rank")
        body = Mlp.init(widths, stream, rank=rank)
        # only the last layer may start at zero, or no gradient reaches the stack
        for i, layer in enumerate(body.layers[:-1]):
            s = stream.child(f"{i}.b")
            limit = np.sqrt(6.0 / (layer.rank + layer.out_dim))
            layer.factor_b[...] = (2.0 * s.uniform(layer.factor_b.shape) - 1.0) * limit
    else:
        raise ValueError(f"unknown adapter kind {kind!r}")
    return Adapter(body, float(trained_sigma))


class AdaptiveModel:
    def __init__(self, extractor: Mlp, head: Dense, adapters: Sequence[Adapter] = (),
                 extractor_frozen: bool = False):
        if head.in_dim != extractor.out_dim:
            raise ValueError(f"head expects latent width {head.in_dim}, extractor gives {extractor.out_dim}")
        if head.out_dim < 2:
            raise ValueError("need at least two classes")
        self.extractor = extractor
        self.head = head
        self.adapters: list[Adapter] = []
        self.extractor_frozen = bool(extractor_frozen)
        for adapter in adapters:
            self.add_adapter(adapter)

    @classmethod
    def init(cls, extractor_widths: Sequence[int], num_classes: int, stream: Stream) -> "AdaptiveModel":
        extractor = Mlp.init(extractor_widths, stream.child("extractor"))
        head = Dense.init(extractor.out_dim, num_classes, stream.child("head"))
        return cls(extractor, head)

    @property
    def input_dim(self) -> int:
        return self.extractor.in_dim

    @property
    def latent_dim(self) -> int:
        return self.extractor.out_dim

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def freeze_extractor(self) -> None:
        self.extractor_frozen = True

    def add_adapter(self, adapter: Adapter) -> None:
        if adapter.body.in_dim != self.input_dim:
            raise ValueError(f"adapter input width {adapter.body.in_dim} != model input width {self.input_dim}")
        if adapter.body.out_dim != self.latent_dim:
            raise ValueError(f"adapter latent width {adapter.body.out_dim} != extractor latent width {self.latent_dim}")
        self.freeze_extractor()
        self.adapters.append(adapter)

    def reinit_head(self, stream: Stream) -> None:
        fresh = Dense.init(self.latent_dim, self.num_classes, stream)
        self.head.weight[...] = fresh.weight
        self.head.bias[...] = fresh.bias

    # forward passes

    def latent(self, x) -> np.ndarray:
        z = self.extractor.forward(x)
        if not self.adapters:
            return z
        h = len(self.adapters) * z
        for adapter in self.adapters:
            h = h + adapter(x)
        return h

    def logits(self, x) -> np.ndarray:
        return self.head.forward(self.latent(x))

    def forward_single(self, x) -> np.ndarray:
        if len(self.adapters) != 1:
            raise ValueError(f"forward_single needs exactly one adapter, model has {len(self.adapters)}")
        return self.head.forward(self.extractor.forward(x) + self.adapters[0](x))

    def forward_ensemble(self, x) -> np.ndarray:
        if not self.adapters:
            raise ValueError("forward_ensemble needs at least one adapter")
        return self.logits(x)

    def forward_unsimplified(self, x) -> np.ndarray:
        """``head(sum_v (extractor(x) + adapter_v(x)))`` evaluated literally."""
        z = self.extractor.forward(x)
        return self.head.forward(sum(z + adapter(x) for adapter in self.adapters))

    def predict(self, x) -> np.ndarray:
        """Class index per row; ties go to the lowest index."""
        return np.argmax(self.logits(x), axis=-1)

    # parameters and gradients

    def parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.extractor.named_parameters("extractor."))
        for v, adapter in enumerate(self.adapters):
            params.update(adapter.body.named_parameters(f"adapter{v}."))
        params.update({f"head.{k}": a for k, a in self.head.parameters().items()})
        return params

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        params = self.parameters()
        if self.extractor_frozen:
            params = {k: a for k, a in params.items() if not k.startswith("extractor.")}
        return params

    def backward(self, x, labels, reduction: str = "mean", return_logits: bool = False):
        """Cross-entropy loss and a :class:`GradientTape` for every trainable parameter.

        A frozen extractor gets no tape entries at all. With ``return_logits``
        the forward logits come back as a third element.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ext_cache: list = []
        z = self.extractor.forward(x, ext_cache)
        V = len(self.adapters)
        h = V * z if V else z
        ad_caches = []
        for adapter in self.adapters:
            cache: list = []
            h = h + adapter.body.forward(x, cache)
            ad_caches.append(cache)
        head_in = h
        logits = self.head.forward(head_in)
        loss, grad_logits = softmax_cross_entropy(logits, labels, reduction)
        tape = GradientTape()
        grad_h, head_grads = self.head.backward(head_in, grad_logits)
        for v, (adapter, cache) in enumerate(zip(self.adapters, ad_caches)):
            adapter.body.backward(cache, grad_h, tape, f"adapter{v}.")
        if not self.extractor_frozen:
            self.extractor.backward(ext_cache, grad_h * (V if V else 1), tape, "extractor.")
        for k, g in head_grads.items():
            tape.add(f"head.{k}", g)
        if return_logits:
            return loss, tape, logits
        return loss, tape

    def clone(self) -> "AdaptiveModel":
        import copy
        return copy.deepcopy(self)


def predict_class(logits) -> int:
    """Argmax of one logit vector, lowest index on ties."""
    return int(np.argmax(np.asarray(logits)))


def freeze_extractor(model: AdaptiveModel) -> None:
    model.freeze_extractor()


def trainable_parameters(model: AdaptiveModel) -> dict[str, np.ndarray]:
    return model.trainable_parameters()


def half_plane_classifier(w, b: float) -> AdaptiveModel:
    """Linear classifier: class 1 where ``w.x + b > 0``, class 0 otherwise (boundary included)."""
    w = np.asarray(w, dtype=np.float64)
    extractor = Mlp([Dense(np.stack([-w, w]), np.array([-b, b], dtype=np.float64))])
    head = Dense(np.eye(2), np.zeros(2))
    model = AdaptiveModel(extractor, head)
    model.freeze_extractor()
    return model


def constant_classifier(input_dim: int, num_classes: int, cls: int) -> AdaptiveModel:
    """Predicts ``cls`` everywhere: zero weights, head bias picks the class."""
    extractor = Mlp([Dense(np.zeros((1, input_dim)), np.zeros(1))])
    bias = np.zeros(num_classes)
    bias[cls] = 1.0
    model = AdaptiveModel(extractor, Dense(np.zeros((num_classes, 1)), bias))
    model.freeze_extractor()
    return model
