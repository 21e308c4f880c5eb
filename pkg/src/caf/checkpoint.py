"""Line-oriented text checkpoints.

Layout::

    caf-checkpoint v1
    seed 42
    num_classes 4
    extractor frozen=1 widths=2,32,32,8
    adapter kind=mlp widths=2,32,8 trained_sigma=0.25
    adapter kind=lowrank widths=2,8 rank=2 trained_sigma=0.5
    head widths=8,4
    param extractor.0.weight 32 2
    <one line per matrix row, 17 significant digits>
    ...
    crc32 0123abcd

The last line holds the CRC32 of every byte before it. Floats are written
with 17 significant digits, which round-trips float64 exactly.
"""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

from caf.model import Adapter, AdaptiveModel
from caf.nn import Dense, LowRankDense, Mlp

MAGIC = "caf-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps(model: AdaptiveModel, seed: int = 0) -> str:
    lines = [f"{MAGIC} v{VERSION}", f"seed {int(seed)}", f"num_classes {model.num_classes}",
             f"extractor frozen={int(model.extractor_frozen)} widths={_ints(model.extractor.widths)}"]
    for adapter in model.adapters:
        line = f"adapter kind={adapter.kind} widths={_ints(adapter.body.widths)}"
        if adapter.kind == "lowrank":
            line += f" rank={adapter.rank}"
        lines.append(line + f" trained_sigma={_fmt(adapter.trained_sigma)}")
    lines.append(f"head widths={model.head.in_dim},{model.head.out_dim}")
    for name, arr in model.parameters().items():
        mat = np.atleast_2d(arr) if arr.ndim == 1 else arr
        lines.append(f"param {name} " + " ".join(str(s) for s in arr.shape))
        if arr.ndim == 1:
            lines.append(" ".join(_fmt(v) for v in arr))
        else:
            lines.extend(" ".join(_fmt(v) for v in row) for row in mat)
    body = "\n".join(lines) + "\n"
    return body + f"crc32 {zlib.crc32(body.encode()):08x}\n"


def save_checkpoint(model: AdaptiveModel, path, seed: int = 0) -> int:
    """Write ``model`` to ``path``; returns the CRC32 recorded in the file."""
    text = dumps(model, seed)
    Path(path).write_text(text)
    return int(text.rstrip("\n").rsplit(" ", 1)[1], 16)


def _kv(tokens: list[str], where: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise MalformedCheckpointError(f"{where}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _widths(s: str, where: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",")]
    except ValueError:
        raise MalformedCheckpointError(f"{where}: bad widths {s!r}") from None


def _empty_mlp(widths: list[int], rank: int | None) -> Mlp:
    layers = []
    for a, b in zip(widths, widths[1:]):
        if rank is None:
            layers.append(Dense(np.zeros((b, a)), np.zeros(b)))
        else:
            layers.append(LowRankDense(np.zeros((b, rank)), np.zeros((rank, a))))
    return Mlp(layers)


def loads(text: str) -> tuple[AdaptiveModel, dict]:
    """Parse checkpoint text into ``(model, metadata)``."""
    if not text.startswith(MAGIC + " "):
        raise MalformedCheckpointError("missing caf-checkpoint header")
    first = text.split("\n", 1)[0]
    if first != f"{MAGIC} v{VERSION}":
        raise VersionMismatchError(f"unsupported checkpoint version line {first!r}, expected v{VERSION}")
    body, sep, tail = text.rstrip("\n").rpartition("\n")
    if not sep or not tail.startswith("crc32 "):
        raise MalformedCheckpointError("missing crc32 trailer")
    body += "\n"
    try:
        expected = int(tail.split()[1], 16)
    except (IndexError, ValueError):
        raise MalformedCheckpointError(f"bad crc32 line {tail!r}") from None
    if zlib.crc32(body.encode()) != expected:
        raise ChecksumError("checksum mismatch: checkpoint is corrupted or was edited")

    lines = body.rstrip("\n").split("\n")[1:]
    meta: dict = {"adapters": []}
    pos = 0
    extractor_spec = head_spec = None
    try:
        while pos < len(lines) and not lines[pos].startswith("param "):
            tokens = lines[pos].split()
            where = f"line {pos + 2}"
            key = tokens[0]
            if key == "seed":
                meta["seed"] = int(tokens[1])
            elif key == "num_classes":
                meta["num_classes"] = int(tokens[1])
            elif key == "extractor":
                kv = _kv(tokens[1:], where)
                extractor_spec = (_widths(kv["widths"], where), kv["frozen"] == "1")
            elif key == "adapter":
                kv = _kv(tokens[1:], where)
                rank = int(kv["rank"]) if kv["kind"] == "lowrank" else None
                if kv["kind"] not in ("mlp", "lowrank"):
                    raise MalformedCheckpointError(f"{where}: unknown adapter kind {kv['kind']!r}")
                meta["adapters"].append({"kind": kv["kind"], "widths": _widths(kv["widths"], where),
                                         "rank": rank, "trained_sigma": float(kv["trained_sigma"])})
            elif key == "head":
                head_spec = _widths(_kv(tokens[1:], where)["widths"], where)
            else:
                raise MalformedCheckpointError(f"{where}: unknown header key {key!r}")
            pos += 1
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise MalformedCheckpointError(f"malformed header near line {pos + 2}: {exc}") from None
    if extractor_spec is None or head_spec is None:
        raise MalformedCheckpointError("header lacks extractor or head")

    extractor = _empty_mlp(extractor_spec[0], None)
    head = Dense(np.zeros((head_spec[1], head_spec[0])), np.zeros(head_spec[1]))
    adapters = [Adapter(_empty_mlp(a["widths"], a["rank"]), a["trained_sigma"]) for a in meta["adapters"]]
    try:
        model = AdaptiveModel(extractor, head, adapters, extractor_frozen=extractor_spec[1])
    except ValueError as exc:
        raise MalformedCheckpointError(f"inconsistent topology: {exc}") from None
    if model.adapters and not extractor_spec[1]:
        raise MalformedCheckpointError("adapters present but extractor not frozen")

    params = model.parameters()
    seen = set()
    while pos < len(lines):
        tokens = lines[pos].split()
        if len(tokens) < 3 or tokens[0] != "param":
            raise MalformedCheckpointError(f"line {pos + 2}: expected a param block")
        name, shape = tokens[1], tuple(int(s) for s in tokens[2:])
        if name not in params or params[name].shape != shape:
            raise MalformedCheckpointError(f"line {pos + 2}: unexpected parameter {name} {shape}")
        nrows = 1 if len(shape) == 1 else shape[0]
        rows = lines[pos + 1:pos + 1 + nrows]
        if len(rows) != nrows:
            raise MalformedCheckpointError(f"parameter {name} is truncated")
        try:
            values = np.array([[float(v) for v in row.split()] for row in rows])
        except ValueError:
            raise MalformedCheckpointError(f"parameter {name}: non-numeric value") from None
        if values.size != params[name].size:
            raise MalformedCheckpointError(f"parameter {name}: wrong number of values")
        params[name][...] = values.reshape(shape)
        seen.add(name)
        pos += 1 + nrows
    missing = set(params) - seen
    if missing:
        raise MalformedCheckpointError(f"missing parameters: {sorted(missing)}")
    return model, meta


def load_checkpoint(path) -> AdaptiveModel:
    return loads(Path(path).read_text())[0]


def load_checkpoint_meta(path) -> tuple[AdaptiveModel, dict]:
    return loads(Path(path).read_text())
