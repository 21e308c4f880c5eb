"""Central finite-difference check of every analytic gradient.

Each topology gets random widths, random parameters (adapter output layers
included, so no branch starts at zero) and a small labelled batch. Every
parameter entry is perturbed by ``+-h`` and the centred difference of the
batch-mean loss is compared against the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from caf.model import AdaptiveModel, make_adapter
from caf.nn import softmax_cross_entropy
from caf.rng import Stream

STEP = 1e-5
TOLERANCE = 1e-4
# entries where both gradients are below this are not compared
FLOOR = 1e-8


@dataclass
class TopologyResult:
    name: str
    checked: int
    skipped: int
    max_rel_error: float


def _randint(stream: Stream, lo: int, hi: int) -> int:
    return lo + int(stream.integers(hi - lo + 1))


def _randomize(model: AdaptiveModel, stream: Stream) -> None:
    for name, arr in model.parameters().items():
        arr[...] = stream.child(name).normal(arr.shape, 0.5)


def build_topologies(seed: int = 0) -> list[tuple[str, AdaptiveModel]]:
    """Six randomly sized models covering bare, adapted, low-rank and ensemble forms."""
    root = Stream(seed, ("gradcheck",))
    out = []

    def dims(tag):
        s = root.child(tag)
        return (_randint(s.child("d"), 2, 5), _randint(s.child("h"), 3, 10),
                _randint(s.child("z"), 3, 6), _randint(s.child("c"), 2, 5), s)

    # bare classifier with the fixed 2-16-8-3 shape
    s = root.child("mlp")
    out.append(("mlp 2-16-8-3", AdaptiveModel.init([2, 16, 8], 3, s)))

    d, h, z, c, s = dims("deep")
    out.append((f"deep {d}-{h}-{h}-{z}-{c}", AdaptiveModel.init([d, h, h, z], c, s)))

    d, h, z, c, s = dims("adapter")
    m = AdaptiveModel.init([d, h, z], c, s)
    m.add_adapter(make_adapter("mlp", [d, h, z], 0.25, s.child("a")))
    out.append((f"mlp adapter {d}-{h}-{z} c={c}", m))

    d, h, z, c, s = dims("lowrank")
    r = _randint(s.child("r"), 1, min(d, z))
    m = AdaptiveModel.init([d, h, z], c, s)
    m.add_adapter(make_adapter("lowrank", [d, z], 0.5, s.child("a"), rank=r))
    out.append((f"lowrank adapter {d}-{z} rank={r} c={c}", m))

    d, h, z, c, s = dims("lowrank_stack")
    r = _randint(s.child("r"), 1, min(d, z))
    m = AdaptiveModel.init([d, h, z], c, s)
    m.add_adapter(make_adapter("lowrank", [d, h, z], 0.25, s.child("a0"), rank=r))
    m.add_adapter(make_adapter("mlp", [d, h, z], 1.0, s.child("a1")))
    out.append((f"ensemble V=2 lowrank {d}-{h}-{z} rank={r} + mlp c={c}", m))

    d, h, z, c, s = dims("ensemble")
    r = _randint(s.child("r"), 1, min(d, z))
    m = AdaptiveModel.init([d, h, z], c, s)
    for v, sigma in enumerate((0.25, 0.5, 1.0)):
        kind = "lowrank" if v == 1 else "mlp"
        widths = [d, z] if kind == "lowrank" else [d, h, z]
        m.add_adapter(make_adapter(kind, widths, sigma, s.child(f"a{v}"), rank=r))
    out.append((f"ensemble V=3 {d}-{h}-{z} c={c}", m))

    for i, (_, model) in enumerate(out):
        _randomize(model, root.child("params").child(str(i)))
    return out


def check_model(model: AdaptiveModel, x: np.ndarray, labels: np.ndarray,
                step: float = STEP) -> tuple[int, int, float]:
    """Returns (entries compared, entries skipped, max relative error)."""
    _, tape = model.backward(x, labels)
    checked = skipped = 0
    worst = 0.0
    for name, arr in model.trainable_parameters().items():
        grad = tape[name]
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = softmax_cross_entropy(model.logits(x), labels)[0]
            flat[j] = old - step
            down = softmax_cross_entropy(model.logits(x), labels)[0]
            flat[j] = old
            numeric = (up - down) / (2 * step)
            analytic = float(grad.reshape(-1)[j])
            scale = max(abs(numeric), abs(analytic))
            if scale < FLOOR:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, abs(numeric - analytic) / scale)
    return checked, skipped, worst


def run(seed: int = 0, batch: int = 5) -> list[TopologyResult]:
    results = []
    for i, (name, model) in enumerate(build_topologies(seed)):
        s = Stream(seed, ("gradcheck", "batch", str(i)))
        x = s.child("x").normal((batch, model.input_dim))
        labels = s.child("y").integers(model.num_classes, batch)
        results.append(TopologyResult(name, *check_model(model, x, labels)))
    return results


def report(results: list[TopologyResult], tolerance: float = TOLERANCE) -> tuple[str, bool]:
    worst = max(r.max_rel_error for r in results)
    ok = worst <= tolerance
    lines = [f"topology={r.name!r} checked={r.checked} skipped={r.skipped} "
             f"max_rel_error={r.max_rel_error:.3e}" for r in results]
    lines.append(f"max_relative_error={worst:.3e} tolerance={tolerance:g} "
                 f"status={'PASS' if ok else 'FAIL'}")
    return "\n".join(lines), ok
