"""Experiment configuration files.

The format is flat ``key = value`` lines. ``#`` starts a comment, blank lines
are ignored and list values are comma separated::

    # blobs run
    seed = 42
    dataset = blobs
    extractor_widths = 2, 32, 32, 8
    learning_rate = 0.05
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """A config problem, with the offending key and line when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


DATASETS = ("blobs", "half_plane", "idx", "csv")
ADAPTER_KINDS = ("mlp", "lowrank")

# keys that training commands cannot run without
TRAINING_KEYS = ("learning_rate", "epochs", "batch_size")


@dataclass
class ExperimentConfig:
    seed: int = 0
    # dataset
    dataset: str = "blobs"
    num_classes: int = 4
    points_per_class: int = 250
    dimension: int = 2
    center_separation: float = 2.0
    spread: list[float] | None = None
    num_points: int = 500
    normal: list[float] | None = None
    offset: float = 0.0
    band: float = 0.0
    box: float = 1.0
    data_path: str | None = None
    labels_path: str | None = None
    test_data_path: str | None = None
    test_labels_path: str | None = None
    test_fraction: float = 0.2
    # topology
    extractor_widths: list[int] | None = None
    adapter: str = "mlp"
    adapter_widths: list[int] | None = None
    rank: int = 4
    # training
    learning_rate: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    sigma: float = 0.0
    sigma_mixture: list[float] | None = None
    sigma_weights: list[float] | None = None
    reinit_head: bool = True
    holdout_fraction: float = 0.2
    # certification
    n0: int = 100
    n: int = 100_000
    alpha: float = 0.001
    cert_batch_size: int | None = None
    radius_mode: str = "one_sided"
    certify_limit: int | None = None
    workers: int = 1
    radii: list[float] | None = None
    output_dir: str = "."

    def require(self, *keys: str) -> None:
        for key in keys:
            if getattr(self, key) is None:
                raise ConfigError("required key is missing", key)

    def validate(self, lines: dict[str, int] | None = None) -> "ExperimentConfig":
        """Check every field; ``lines`` maps keys to source lines for diagnostics."""
        lines = lines or {}

        def bad(key, message):
            raise ConfigError(message, key, lines.get(key))

        if self.dataset not in DATASETS:
            bad("dataset", f"must be one of {', '.join(DATASETS)}")
        if self.adapter not in ADAPTER_KINDS:
            bad("adapter", f"must be one of {', '.join(ADAPTER_KINDS)}")
        if self.radius_mode not in ("one_sided", "two_class"):
            bad("radius_mode", "must be one_sided or two_class")
        for key in ("num_classes", "points_per_class", "dimension", "num_points", "rank", "n0", "n", "workers"):
            if getattr(self, key) < 1:
                bad(key, "must be a positive integer")
        if self.num_classes < 2:
            bad("num_classes", "need at least two classes")
        if self.n0 > self.n:
            bad("n0", "must not exceed n")
        if not 0 < self.alpha < 1:
            bad("alpha", "must lie in (0, 1)")
        if self.cert_batch_size is not None and not 1 <= self.cert_batch_size <= self.n:
            bad("cert_batch_size", "must lie in [1, n]")
        for key in ("test_fraction", "holdout_fraction"):
            if not 0 <= getattr(self, key) < 1:
                bad(key, "must lie in [0, 1)")
        if self.sigma < 0:
            bad("sigma", "must be non-negative")
        if self.learning_rate is not None and not self.learning_rate > 0:
            bad("learning_rate", "must be positive")
        if self.epochs is not None and self.epochs < 0:
            bad("epochs", "must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            bad("batch_size", "must be positive")
        for key in ("extractor_widths", "adapter_widths"):
            widths = getattr(self, key)
            if widths is not None and (len(widths) < 2 or min(widths) < 1):
                bad(key, "needs at least two positive widths")
        if self.spread is not None and (not self.spread or min(self.spread) <= 0):
            bad("spread", "must be positive")
        if self.spread is not None and len(self.spread) not in (1, self.num_classes):
            bad("spread", "give one value or one per class")
        if self.center_separation <= 0:
            bad("center_separation", "must be positive")
        if self.normal is not None and len(self.normal) != self.dimension:
            bad("normal", f"must have {self.dimension} entries")
        if self.sigma_mixture is not None and min(self.sigma_mixture, default=0) <= 0:
            bad("sigma_mixture", "needs positive sigmas")
        if self.sigma_weights is not None:
            if self.sigma_mixture is None or len(self.sigma_weights) != len(self.sigma_mixture):
                bad("sigma_weights", "needs one weight per sigma_mixture entry")
            if min(self.sigma_weights) <= 0 or abs(sum(self.sigma_weights) - 1) > 1e-9:
                bad("sigma_weights", "weights must be positive and sum to 1")
        if self.radii is not None:
            if min(self.radii, default=0) < 0 or self.radii != sorted(self.radii):
                bad("radii", "must be non-negative and ascending")
        return self

    @property
    def radii_grid(self) -> list[float]:
        return self.radii if self.radii is not None else [0.25 * i for i in range(9)]

    @property
    def mixture(self) -> list[tuple[float, float]]:
        sigmas = self.sigma_mixture if self.sigma_mixture is not None else [0.25, 0.5, 1.0]
        weights = self.sigma_weights if self.sigma_weights is not None else [1.0 / len(sigmas)] * len(sigmas)
        return list(zip(sigmas, weights))


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, line: int | None) -> Any:
    kind = _TYPES[key]
    try:
        if raw.lower() == "none" and "None" in kind:
            return None
        if kind.startswith("list[float]"):
            return [float(v) for v in raw.split(",") if v.strip()]
        if kind.startswith("list[int]"):
            return [int(v) for v in raw.split(",") if v.strip()]
        if kind.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        expected = kind.split(" |")[0]
        raise ConfigError(f"cannot parse {raw!r} as {expected}", key, line) from None


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError("unknown key", key, lineno)
        if key in values:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        if not value:
            raise ConfigError("empty value", key, lineno)
        values[key] = _convert(key, value, lineno)
        lines[key] = lineno
    return ExperimentConfig(**values).validate(lines)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text for ``cfg``; keys left unset are omitted."""
    out = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is not None:
            out.append(f"{f.name} = {_format(value)}")
    return "\n".join(out) + "\n"
