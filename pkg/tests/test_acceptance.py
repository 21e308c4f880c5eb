"""Acceptance suite: one recorded PASS/FAIL line per criterion.

Benchmarks run through the command-line entry points with the configs in
``configs/``. Tolerances and budgets are fixed here and never adjusted to
fit an outcome.
"""
import csv
import time
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from caf import cli, gradcheck, stats
from caf.checkpoint import load_checkpoint, save_checkpoint
from caf.config import emit_config, load_config
from caf.data import make_half_plane
from caf.model import half_plane_classifier
from caf.rng import Stream
from caf.smoothing import CertifyParams, NoiseModel, certify, certify_dataset, noisy_accuracy

W = np.array([0.6, 0.8])
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def criterion(number):
    def mark(fn):
        fn.criterion = number
        return fn
    return mark


def derive(base_conf, path, **changes):
    cfg = replace(load_config(base_conf), **changes)
    path.write_text(emit_config(cfg))
    return path


def run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"caf {argv[0]} exited with {code}"


def curve_at(cert_csv, radii):
    return cli.curve_values(cli.read_certification(cert_csv), radii)


@criterion(1)
def test_statistical_primitives(record):
    start = time.perf_counter()
    grid = np.linspace(1e-6, 1 - 1e-6, 10_000)
    q = np.array([stats.std_normal_quantile(p) for p in grid])
    q_mirror = np.array([stats.std_normal_quantile(1 - p) for p in grid])
    antisym = float(np.max(np.abs(q + q_mirror)))
    round_trip = float(np.max(np.abs([stats.norm_cdf(x) - p for x, p in zip(q, grid)])))
    closed = max(abs(stats.clopper_pearson_lower(n, n, a) - a ** (1 / n))
                 for n in (1, 10, 100, 1000, 100_000) for a in (0.001, 0.05, 0.2))
    rng = np.random.default_rng(2024)
    draws = rng.binomial(500, 0.6, size=2000)
    violation = float(np.mean([stats.clopper_pearson_lower(int(k), 500, 0.05) > 0.6 for k in draws]))
    elapsed = time.perf_counter() - start
    ok = antisym <= 1e-10 and round_trip <= 1e-9 and closed <= 1e-9 and violation <= 0.07 and elapsed <= 30
    assert record(1, ok, f"antisymmetry={antisym:.1e} round_trip={round_trip:.1e} cp_closed_form={closed:.1e} "
                         f"coverage_violation={violation:.4f} time={elapsed:.1f}s")


@criterion(2)
def test_radius_formulas(record):
    two = stats.certified_radius_two_class(0.7, 0.2, 0.25)
    one = stats.certified_radius_one_sided(0.8, 0.5)
    rng = np.random.default_rng(7)
    gaps = []
    for p, sigma in zip(rng.uniform(0.5 + 1e-6, 1 - 1e-6, 100), rng.uniform(0.05, 2.0, 100)):
        gaps.append(abs(stats.certified_radius_two_class(p, 1 - p, sigma) - stats.certified_radius_one_sided(p, sigma)))
    ok = abs(two - 0.170752) <= 1e-6 and abs(one - 0.420811) <= 1e-6 and max(gaps) <= 1e-10
    assert record(2, ok, f"two_class={two:.7f} one_sided={one:.7f} max_coincidence_gap={max(gaps):.1e}")


@criterion(3)
def test_gradient_correctness(record):
    start = time.perf_counter()
    results = gradcheck.run(0)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in results)
    lowrank = sum("lowrank" in r.name for r in results)
    ok = len(results) >= 5 and lowrank >= 1 and worst <= 1e-4 and elapsed <= 60
    assert record(3, ok, f"topologies={len(results)} with_lowrank={lowrank} max_rel_error={worst:.2e} "
                         f"time={elapsed:.1f}s")


@criterion(4)
def test_half_plane_soundness(record):
    start = time.perf_counter()
    ds = make_half_plane(500, 2, W, 0.0, 0.05, seed=4)
    model = half_plane_classifier(W, 0.0)
    outs = certify_dataset(model, ds, NoiseModel(0.5), CertifyParams(n0=100, n=100_000, alpha=0.001), Stream(4))
    elapsed = time.perf_counter() - start
    dist = np.abs(ds.meta["signed_distance"])
    radius = np.array([o.radius for o in outs])
    wrong_class = sum(o.certified and o.cls != y for o, y in zip(outs, ds.labels))
    excess = int(np.sum(radius > dist + 1e-9)) + wrong_class
    ratio = float(np.median(radius / dist))
    ok = excess == 0 and ratio >= 0.85 and elapsed <= 600
    assert record(4, ok, f"certifications=500 radius_exceeds_distance={excess} median_radius_ratio={ratio:.4f} "
                         f"time={elapsed:.1f}s")


@criterion(5)
def test_abstention_calibration(record):
    model = half_plane_classifier(W, 0.0)
    params = CertifyParams(n0=100, n=100_000, alpha=0.001)
    outs = [certify(model, np.zeros(2), NoiseModel(0.5), params, Stream(5, ("boundary", str(i)))) for i in range(200)]
    rate = float(np.mean([not o.certified for o in outs]))
    assert record(5, rate >= 0.99, f"boundary abstention rate={rate:.3f} over 200 certifications")


@pytest.fixture(scope="module")
def blobs2d(tmp_path_factory):
    """Pretrain, adapter and certification runs on the 2-d blobs benchmark."""
    root = tmp_path_factory.mktemp("blobs2d")
    start = time.perf_counter()
    run("pretrain", "--config", CONFIGS / "blobs2d.conf", "--out", root / "base")
    run("train-adapter", "--config", CONFIGS / "blobs2d_adapter.conf", "--base", root / "base/pretrain.ckpt",
        "--out", root / "caf")
    run("certify", "--config", CONFIGS / "blobs2d_adapter.conf", "--model", root / "base/pretrain.ckpt",
        "--out", root / "base")
    run("certify", "--config", CONFIGS / "blobs2d_adapter.conf", "--model", root / "caf/adapter.ckpt",
        "--out", root / "caf")
    return root, time.perf_counter() - start


@criterion(6)
def test_caf_improvement(record, blobs2d, configs):
    root, elapsed = blobs2d
    train, test = cli.load_datasets(load_config(configs / "blobs2d.conf"))
    radii = [0.1, 0.25, 0.5]
    base = curve_at(root / "base/certify.csv", radii)
    ours = curve_at(root / "caf/certify.csv", radii)
    gains = [o - b for o, b in zip(ours, base)]
    ok = (len(train), len(test)) == (800, 200) and all(g >= 0.05 for g in gains) and elapsed <= 300
    detail = " ".join(f"r={r}: base={b:.3f} caf={o:.3f}" for r, b, o in zip(radii, base, ours))
    assert record(6, ok, f"{detail} time={elapsed:.1f}s")


@criterion(7)
def test_ensemble_averaging(record, configs, tmp_path):
    start = time.perf_counter()
    sigmas = (0.25, 0.5, 1.0)
    run("pretrain", "--config", configs / "blobs16d.conf", "--out", tmp_path / "base")
    base = tmp_path / "base/pretrain.ckpt"
    singles = []
    for s in sigmas:
        conf = derive(configs / "blobs16d_adapter.conf", tmp_path / f"a{s}.conf", sigma=s)
        run("train-adapter", "--config", conf, "--base", base, "--out", tmp_path / f"a{s}")
        singles.append(tmp_path / f"a{s}/adapter.ckpt")
    run("ensemble", "--config", configs / "blobs16d_ensemble.conf", "--base", base, "--adapters", *singles,
        "--out", tmp_path / "ens")
    _, test = cli.load_datasets(load_config(configs / "blobs16d.conf"))

    def accuracies(path):
        model = load_checkpoint(path)
        return [noisy_accuracy(model, test, s, Stream(7).child(str(s)), draws=50) for s in sigmas]

    single_acc = [accuracies(p) for p in singles]
    ens_acc = accuracies(tmp_path / "ens/ensemble.ckpt")
    elapsed = time.perf_counter() - start
    ens_mean = float(np.mean(ens_acc))
    single_means = [float(np.mean(a)) for a in single_acc]
    diagonal = [single_acc[i][i] - ens_acc[i] for i in range(3)]
    ok = ens_mean >= max(single_means) and all(d > 0 for d in diagonal) and elapsed <= 600
    assert record(7, ok, f"ensemble_mean={ens_mean:.4f} single_means={[round(m, 4) for m in single_means]} "
                         f"diagonal_margins={[round(d, 4) for d in diagonal]} time={elapsed:.1f}s")


@criterion(8)
def test_curves_and_envelope(record, blobs2d, configs, tmp_path):
    root, _ = blobs2d
    inputs = []
    for s in (0.25, 0.5):
        conf = derive(configs / "blobs2d_adapter.conf", tmp_path / f"c{s}.conf", sigma=s)
        run("certify", "--config", conf, "--model", root / "caf/adapter.ckpt", "--out", tmp_path / f"c{s}")
        inputs.append(tmp_path / f"c{s}/certify.csv")
    inputs.append(root / "caf/certify.csv")
    grid = "0,0.1,0.25,0.5,0.75,1,1.5,2,3"
    run("curve", *inputs, "--radii", grid, "--out", tmp_path)
    with open(tmp_path / "curve.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    curves = {}
    for row in rows:
        curves.setdefault(row["curve"], []).append(float(row["certified_accuracy"]))
    monotone = all(all(b <= a for a, b in zip(v, v[1:])) for v in curves.values())
    envelope = curves.pop("envelope")
    dominates = all(e >= c for v in curves.values() for e, c in zip(envelope, v))
    ok = len(curves) == 3 and monotone and dominates
    assert record(8, ok, f"curves={len(curves)} monotone={monotone} envelope_dominates={dominates}")


SMALL = """
seed = 3
dataset = blobs
num_classes = 3
points_per_class = 40
dimension = 6
spread = 0.3
extractor_widths = 6, 8, 4
adapter_widths = 6, 8, 4
learning_rate = 0.05
epochs = 3
batch_size = 16
n0 = 20
n = 500
workers = 2
"""


@criterion(9)
def test_determinism_and_round_trip(record, tmp_path):
    outputs = []
    for attempt in ("first", "second"):
        d = tmp_path / attempt
        d.mkdir()
        base = d / "base.conf"
        base.write_text(SMALL)
        paths = []
        run("pretrain", "--config", base, "--out", d / "p")
        paths.append(d / "p/pretrain.ckpt")
        for s in (0.25, 0.5):
            conf = d / f"s{s}.conf"
            conf.write_text(SMALL + f"sigma = {s}\n")
            run("train-adapter", "--config", conf, "--base", d / "p/pretrain.ckpt", "--out", d / f"a{s}")
            paths.append(d / f"a{s}/adapter.ckpt")
        run("ensemble", "--config", base, "--base", d / "p/pretrain.ckpt", "--adapters", *paths[1:],
            "--out", d / "e")
        paths.append(d / "e/ensemble.ckpt")
        run("certify", "--config", d / "s0.5.conf", "--model", d / "e/ensemble.ckpt", "--out", d / "c")
        paths.append(d / "c/certify.csv")
        run("curve", d / "c/certify.csv", "--out", d / "c")
        paths.append(d / "c/curve.csv")
        outputs.append([p.read_bytes() for p in paths])
    identical = outputs[0] == outputs[1]
    reports = [gradcheck.report(gradcheck.run(11))[0] for _ in range(2)]
    identical = identical and reports[0] == reports[1]

    model = load_checkpoint(tmp_path / "first/e/ensemble.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt", seed=3)
    again = load_checkpoint(tmp_path / "again.ckpt")
    x = Stream(9).normal((100, 6))
    gap = float(np.max(np.abs(again.logits(x) - model.logits(x))))
    ok = identical and gap <= 1e-12
    assert record(9, ok, f"commands_byte_identical={identical} round_trip_max_gap={gap:.1e}")


@criterion(10)
def test_rank_insensitivity(record, configs, tmp_path):
    run("pretrain", "--config", configs / "blobs16d.conf", "--out", tmp_path / "base")
    acc = {}
    for rank in (2, 4, 8):
        conf = derive(configs / "blobs16d_adapter.conf", tmp_path / f"r{rank}.conf", sigma=0.5, adapter="lowrank",
                      rank=rank, adapter_widths=[16, 8])
        run("train-adapter", "--config", conf, "--base", tmp_path / "base/pretrain.ckpt", "--out", tmp_path / f"r{rank}")
        run("certify", "--config", conf, "--model", tmp_path / f"r{rank}/adapter.ckpt", "--out", tmp_path / f"r{rank}")
        acc[rank] = curve_at(tmp_path / f"r{rank}/certify.csv", [0.25])[0]
    spread = max(acc.values()) - min(acc.values())
    ok = spread <= 0.03
    assert record(10, ok, f"certified accuracy at r=0.25 by rank {acc} spread={spread:.3f}")
