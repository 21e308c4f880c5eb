"""Training: clean pretraining, noisy adapter training, ensemble fine-tuning.

All three minimise mean softmax cross-entropy with constant-rate SGD. The
noisy variants draw one fresh Gaussian perturbation per sample per epoch,
which makes the loss the usual log-softmax surrogate for the log
probability of classifying ``x + eps`` correctly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from caf.data import Dataset, split
from caf.model import AdaptiveModel
from caf.nn import log_softmax, sgd_step
from caf.rng import Stream

JENSEN_SLACK = 1e-9


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    sigma: float = 0.0
    seed: int = 0
    # (sigma, weight) pairs; only used by finetune_ensemble
    sigma_mixture: list[tuple[float, float]] | None = None
    reinit_head: bool = True
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.sigma_mixture is not None:
            self.sigma_mixture = [(float(s), float(w)) for s, w in self.sigma_mixture]
            if not self.sigma_mixture:
                raise ValueError("sigma_mixture is empty")
            if any(s <= 0 or w <= 0 for s, w in self.sigma_mixture):
                raise ValueError("sigma_mixture needs positive sigmas and weights")
            if abs(sum(w for _, w in self.sigma_mixture) - 1.0) > 1e-9:
                raise ValueError("sigma_mixture weights must sum to 1")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    clean_accuracy: float = float("nan")
    noisy_accuracy: float = float("nan")
    # smallest per-batch gap log(mean p_y) - mean(log p_y) seen in each epoch
    jensen_gaps: list[float] = field(default_factory=list)


# (epoch, sample indices, perturbed inputs) for each mini-batch
BatchHook = Callable[[int, np.ndarray, np.ndarray], None]


def _snapshot(model: AdaptiveModel) -> bytes:
    return b"".join(a.tobytes() for k, a in model.parameters().items() if k.startswith("extractor."))


def _sample_sigmas(cfg: TrainConfig, count: int, stream: Stream) -> np.ndarray:
    if cfg.sigma_mixture is None:
        return np.full(count, cfg.sigma)
    sig = np.array([s for s, _ in cfg.sigma_mixture])
    cum = np.cumsum([w for _, w in cfg.sigma_mixture])
    pick = np.searchsorted(cum, stream.uniform(count) * cum[-1], side="right")
    return sig[np.minimum(pick, len(sig) - 1)]


def _jensen_gap(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(logits)[np.arange(len(labels)), labels]
    m = float(lp.max())
    log_mean_p = m + math.log(float(np.mean(np.exp(lp - m))))
    return log_mean_p - float(lp.mean())


def _fit(model: AdaptiveModel, train_set: Dataset, cfg: TrainConfig, stream: Stream,
         noisy: bool, verbose: bool, on_batch: BatchHook | None) -> tuple[list[float], list[float]]:
    params = model.trainable_parameters()
    n, d = train_set.inputs.shape
    losses, gaps = [], []
    for epoch in range(cfg.epochs):
        order = stream.child("shuffle").child(str(epoch)).permutation(n)
        x_all = train_set.inputs
        if noisy:
            noise_stream = stream.child("noise").child(str(epoch))
            scale = _sample_sigmas(cfg, n, noise_stream.child("sigma"))
            x_all = x_all + noise_stream.normal((n, d)) * scale[:, None]
        total, worst_gap = 0.0, math.inf
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], train_set.labels[idx]
            if on_batch is not None:
                on_batch(epoch, idx, xb)
            loss, tape, logits = model.backward(xb, yb, return_logits=True)
            gap = _jensen_gap(logits, yb)
            if gap < -JENSEN_SLACK:
                raise AssertionError(f"log-softmax bound violated by {-gap:.3g} in epoch {epoch}")
            worst_gap = min(worst_gap, gap)
            sgd_step(params, tape, cfg.learning_rate)
            total += loss * len(idx)
        losses.append(total / n)
        gaps.append(worst_gap)
        if verbose:
            print(f"epoch={epoch} loss={losses[-1]:.6f} ", flush=True)
    return losses, gaps


def _report(model: AdaptiveModel, held: Dataset, cfg: TrainConfig, stream: Stream,
            losses: list[float], gaps: list[float]) -> TrainReport:
    report = TrainReport(losses, jensen_gaps=gaps)
    if len(held) == 0:
        return report
    report.clean_accuracy = float(np.mean(model.predict(held.inputs) == held.labels))
    scale = _sample_sigmas(cfg, len(held), stream.child("sigma"))
    x = held.inputs + stream.normal(held.inputs.shape) * scale[:, None]
    report.noisy_accuracy = float(np.mean(model.predict(x) == held.labels))
    return report


def pretrain_clean(model: AdaptiveModel, dataset: Dataset, cfg: TrainConfig,
                   verbose: bool = False, on_batch: BatchHook | None = None) -> TrainReport:
    """Train extractor and head jointly on clean data, then freeze the extractor."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.sigma != 0:
        raise ValueError("clean pretraining requires sigma = 0")
    if model.adapters or model.extractor_frozen:
        raise ValueError("pretraining needs a bare model with a trainable extractor")
    train_set, held = split(dataset, cfg.seed, cfg.holdout_fraction)
    stream = Stream(cfg.seed, ("pretrain",))
    losses, gaps = _fit(model, train_set, cfg, stream, False, verbose, on_batch)
    model.freeze_extractor()
    return _report(model, held, cfg, stream.child("eval"), losses, gaps)


def _check_frozen(model: AdaptiveModel) -> None:
    if not model.extractor_frozen:
        raise ValueError("the extractor must be frozen before adapter training")


def train_adapter(model: AdaptiveModel, dataset: Dataset, cfg: TrainConfig,
                  verbose: bool = False, on_batch: BatchHook | None = None) -> TrainReport:
    """Fit the single adapter and the head on noise-augmented data; the extractor stays fixed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _check_frozen(model)
    if len(model.adapters) != 1:
        raise ValueError(f"train_adapter needs exactly one adapter, model has {len(model.adapters)}")
    if not cfg.sigma > 0:
        raise ValueError("adapter training requires sigma > 0")
    cfg = TrainConfig(**{**cfg.__dict__, "sigma_mixture": None})
    train_set, held = split(dataset, cfg.seed, cfg.holdout_fraction)
    stream = Stream(cfg.seed, ("adapter",))
    before = _snapshot(model)
    losses, gaps = _fit(model, train_set, cfg, stream, True, verbose, on_batch)
    if _snapshot(model) != before:
        raise AssertionError("frozen extractor changed during adapter training")
    return _report(model, held, cfg, stream.child("eval"), losses, gaps)


def finetune_ensemble(model: AdaptiveModel, dataset: Dataset, cfg: TrainConfig,
                      verbose: bool = False, on_batch: BatchHook | None = None) -> TrainReport:
    """Fine-tune all adapters and the head under a per-sample mixture of noise scales."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _check_frozen(model)
    if len(model.adapters) < 2:
        raise ValueError("an ensemble needs at least two adapters")
    if not cfg.sigma_mixture:
        raise ValueError("finetune_ensemble needs a sigma_mixture")
    train_set, held = split(dataset, cfg.seed, cfg.holdout_fraction)
    stream = Stream(cfg.seed, ("ensemble",))
    if cfg.reinit_head and cfg.epochs > 0:
        model.reinit_head(stream.child("head"))
    before = _snapshot(model)
    losses, gaps = _fit(model, train_set, cfg, stream, True, verbose, on_batch)
    if _snapshot(model) != before:
        raise AssertionError("frozen extractor changed during ensemble fine-tuning")
    return _report(model, held, cfg, stream.child("eval"), losses, gaps)


def uniform_mixture(sigmas: Sequence[float]) -> list[tuple[float, float]]:
    w = 1.0 / len(sigmas)
    return [(float(s), w) for s in sigmas]
