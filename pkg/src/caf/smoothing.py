"""Monte Carlo prediction and certification of a Gaussian-smoothed classifier.

The smoothed classifier returns the class the base model picks most often
under ``x + eps``, ``eps ~ N(0, sigma^2 I)``. ``certify`` follows the usual
two-round protocol: a small selection round picks the candidate class, a
fresh estimation round lower-bounds its probability, and the bound is
turned into an l2 radius.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from caf import stats
from caf.data import Dataset
from caf.rng import Stream

ABSTAIN = -1
RADIUS_MODES = ("one_sided", "two_class")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")


@dataclass(frozen=True)
class CertifyParams:
    n0: int = 100
    n: int = 100_000
    alpha: float = 0.001
    # defaults to min(10_000, n)
    batch_size: int | None = None
    radius_mode: str = "one_sided"

    def __post_init__(self):
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", min(10_000, self.n))
        if not 1 <= self.n0 <= self.n:
            raise ValueError(f"need n >= n0 >= 1, got n0={self.n0}, n={self.n}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not 1 <= self.batch_size <= self.n:
            raise ValueError(f"batch_size must lie in [1, n], got {self.batch_size}")
        if self.radius_mode not in RADIUS_MODES:
            raise ValueError(f"radius_mode must be one of {RADIUS_MODES}, got {self.radius_mode!r}")


@dataclass
class CertOutcome:
    """Result of one certification; ``cls`` is ``ABSTAIN`` when nothing is certified."""

    cls: int
    radius: float
    p_lower: float
    counts: np.ndarray
    # two_class mode only: the runner-up's upper bound as used in the radius
    p_upper_runner_up: float | None = None
    radius_mode: str = "one_sided"

    @property
    def certified(self) -> bool:
        return self.cls != ABSTAIN

    @property
    def decision(self) -> str:
        return "certified" if self.certified else "abstain"


@dataclass(frozen=True)
class CurveRow:
    radius: float
    certified_accuracy: float


def sample_noise_counts(model, x, noise: NoiseModel, num: int, rng: Stream,
                        batch_size: int = 10_000) -> np.ndarray:
    """Vote counts of ``model.predict(x + eps)`` over ``num`` Gaussian draws."""
    if num < 1:
        raise ValueError("num must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(model.num_classes, dtype=np.int64)
    remaining = num
    while remaining:
        b = min(batch_size, remaining)
        eps = rng.normal((b, x.shape[-1]), noise.sigma)
        counts += np.bincount(model.predict(x + eps), minlength=model.num_classes)
        remaining -= b
    return counts


def _top_two(counts: np.ndarray) -> tuple[int, int]:
    top = int(np.argmax(counts))
    rest = counts.copy()
    rest[top] = -1
    return top, int(np.argmax(rest))


def predict_smoothed(model, x, noise: NoiseModel, params: CertifyParams, rng: Stream) -> int:
    """Majority vote over ``params.n`` draws, or ``ABSTAIN`` when the top two are not
    separated by a two-sided binomial test at level ``alpha``."""
    counts = sample_noise_counts(model, x, noise, params.n, rng, params.batch_size)
    a, b = _top_two(counts)
    n_a, n_b = int(counts[a]), int(counts[b])
    if stats.binom_two_sided_pvalue(n_a, n_a + n_b) <= params.alpha:
        return a
    return ABSTAIN


def certify(model, x, noise: NoiseModel, params: CertifyParams, rng: Stream) -> CertOutcome:
    selection = sample_noise_counts(model, x, noise, params.n0, rng.child("select"), params.batch_size)
    candidate = int(np.argmax(selection))
    counts = sample_noise_counts(model, x, noise, params.n, rng.child("estimate"), params.batch_size)
    p_lower = stats.clopper_pearson_lower(int(counts[candidate]), params.n, params.alpha)
    if p_lower <= 0.5:
        return CertOutcome(ABSTAIN, 0.0, p_lower, counts, radius_mode=params.radius_mode)
    if params.radius_mode == "one_sided":
        radius = stats.certified_radius_one_sided(p_lower, noise.sigma)
        return CertOutcome(candidate, radius, p_lower, counts)
    rest = counts.copy()
    rest[candidate] = -1
    runner_up = int(np.argmax(rest))
    p_upper = stats.clopper_pearson_upper(int(counts[runner_up]), params.n, params.alpha)
    p_b = min(p_upper, 1.0 - p_lower)
    radius = stats.certified_radius_two_class(p_lower, p_b, noise.sigma)
    return CertOutcome(candidate, radius, p_lower, counts, p_b, "two_class")


def certify_dataset(model, dataset: Dataset, noise: NoiseModel, params: CertifyParams, rng: Stream,
                    workers: int = 1, limit: int | None = None) -> list[CertOutcome]:
    """Certify every point; point ``i`` draws from substream ``rng/i`` so results are order-free."""
    indices = range(len(dataset) if limit is None else min(limit, len(dataset)))

    def one(i: int) -> CertOutcome:
        return certify(model, dataset.inputs[i], noise, params, rng.child(str(i)))

    if workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, indices))


def curve_from_outcomes(outcomes: Sequence[CertOutcome], labels, radii: Sequence[float]) -> list[CurveRow]:
    """Certified accuracy at each radius: certified, correct, and radius at least r."""
    radii = [float(r) for r in radii]
    if not outcomes:
        raise ValueError("no outcomes to summarise")
    if any(r < 0 for r in radii) or radii != sorted(radii):
        raise ValueError("radii must be non-negative and sorted ascending")
    labels = np.asarray(labels)
    ok = np.array([o.certified and o.cls == int(y) for o, y in zip(outcomes, labels)])
    rad = np.array([o.radius for o in outcomes])
    return [CurveRow(r, float(np.mean(ok & (rad >= r)))) for r in radii]


def certified_accuracy_curve(model, dataset: Dataset, noise: NoiseModel, params: CertifyParams,
                             radii: Sequence[float], rng: Stream, workers: int = 1) -> list[CurveRow]:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    outcomes = certify_dataset(model, dataset, noise, params, rng, workers)
    return curve_from_outcomes(outcomes, dataset.labels, radii)


def noisy_accuracy(model, dataset: Dataset, sigma: float, rng: Stream, draws: int = 1) -> float:
    """Plain accuracy of ``model`` on ``draws`` noisy copies of every point."""
    x = np.repeat(dataset.inputs, draws, axis=0)
    y = np.repeat(dataset.labels, draws)
    if sigma > 0:
        x = x + rng.normal(x.shape, sigma)
    return float(np.mean(model.predict(x) == y))
