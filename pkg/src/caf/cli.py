"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad config, bad checkpoint, bad
inputs, failed gradient check), 2 runtime error (I/O and anything else).
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from caf import gradcheck
from caf.checkpoint import dumps, load_checkpoint
from caf.config import TRAINING_KEYS, ConfigError, ExperimentConfig, load_config
from caf.data import Dataset, load_csv, load_idx, make_blobs, make_half_plane, split
from caf.model import AdaptiveModel, make_adapter
from caf.rng import Stream
from caf.smoothing import CertifyParams, NoiseModel, certify_dataset
from caf.train import TrainConfig, finetune_ensemble, pretrain_clean, train_adapter

CERT_HEADER = ["index", "label", "decision", "class", "p_lower", "radius", "n0", "n", "alpha", "sigma", "seed"]
CURVE_HEADER = ["radius", "certified_accuracy", "n_points"]


def _fmt(v: float) -> str:
    return repr(float(v))


# datasets


def _generated(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "blobs":
        spread = cfg.spread if cfg.spread is not None else [0.3]
        return make_blobs(cfg.num_classes, cfg.points_per_class, cfg.dimension, cfg.center_separation,
                          spread if len(spread) > 1 else spread[0], cfg.seed)
    normal = cfg.normal if cfg.normal is not None else [1.0] + [0.0] * (cfg.dimension - 1)
    return make_half_plane(cfg.num_points, cfg.dimension, normal, cfg.offset, cfg.band, cfg.seed, cfg.box)


def _load_file(cfg: ExperimentConfig, data_path, labels_path) -> Dataset:
    if cfg.dataset == "idx":
        if labels_path is None:
            raise ConfigError("idx datasets need a label file", "labels_path")
        return load_idx(data_path, labels_path, cfg.num_classes)
    return load_csv(data_path, cfg.num_classes)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for ``cfg``. Without explicit test files the data are split by ``test_fraction``."""
    if cfg.dataset in ("blobs", "half_plane"):
        data = _generated(cfg)
    else:
        cfg.require("data_path")
        data = _load_file(cfg, cfg.data_path, cfg.labels_path)
        if cfg.test_data_path is not None:
            return data, _load_file(cfg, cfg.test_data_path, cfg.test_labels_path)
    return split(data, cfg.seed, cfg.test_fraction)


# training commands


def _train_config(cfg: ExperimentConfig, sigma: float, **extra) -> TrainConfig:
    cfg.require(*TRAINING_KEYS)
    return TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, sigma, cfg.seed,
                       holdout_fraction=cfg.holdout_fraction, **extra)


def _write_checkpoint(model: AdaptiveModel, cfg: ExperimentConfig, name: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    text = dumps(model, cfg.seed)
    path.write_text(text)
    print(f"wrote {path} {text.rstrip().rsplit(' ', 1)[1]}")
    return path


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    cfg.require(*TRAINING_KEYS, "extractor_widths")
    if cfg.sigma != 0:
        raise ConfigError("pretraining runs on clean data and needs sigma = 0", "sigma")
    train, _ = load_datasets(cfg)
    if cfg.extractor_widths[0] != train.dimension:
        raise ConfigError(f"first width must equal the input dimension {train.dimension}", "extractor_widths")
    model = AdaptiveModel.init(cfg.extractor_widths, train.num_classes, Stream(cfg.seed, ("pretrain", "init")))
    report = pretrain_clean(model, train, _train_config(cfg, 0.0), verbose=True)
    print(f"clean_accuracy={report.clean_accuracy:.6f}")
    return _write_checkpoint(model, cfg, "pretrain.ckpt")


def _adapter_widths(cfg: ExperimentConfig, model: AdaptiveModel) -> list[int]:
    if cfg.adapter_widths is not None:
        widths = list(cfg.adapter_widths)
    elif cfg.adapter == "lowrank":
        widths = [model.input_dim, model.latent_dim]
    else:
        widths = [model.input_dim, 32, model.latent_dim]
    if widths[0] != model.input_dim or widths[-1] != model.latent_dim:
        raise ConfigError(f"adapter widths must run from input width {model.input_dim} "
                          f"to latent width {model.latent_dim}", "adapter_widths")
    if cfg.adapter == "lowrank" and cfg.rank > min(widths):
        raise ConfigError("rank exceeds a layer's in or out width", "rank")
    return widths


def cmd_train_adapter(cfg: ExperimentConfig, base_path) -> Path:
    cfg.require(*TRAINING_KEYS)
    if not cfg.sigma > 0:
        raise ConfigError("adapter training needs sigma > 0", "sigma")
    model = load_checkpoint(base_path)
    if model.adapters:
        raise ValueError(f"{base_path}: base checkpoint already carries adapters")
    train, _ = load_datasets(cfg)
    _check_dims(model, train)
    widths = _adapter_widths(cfg, model)
    rank = cfg.rank if cfg.adapter == "lowrank" else None
    model.add_adapter(make_adapter(cfg.adapter, widths, cfg.sigma, Stream(cfg.seed, ("adapter", "init")), rank))
    report = train_adapter(model, train, _train_config(cfg, cfg.sigma), verbose=True)
    print(f"clean_accuracy={report.clean_accuracy:.6f} noisy_accuracy={report.noisy_accuracy:.6f}")
    return _write_checkpoint(model, cfg, "adapter.ckpt")


def _same_extractor(a: AdaptiveModel, b: AdaptiveModel) -> bool:
    pa, pb = a.extractor.named_parameters(""), b.extractor.named_parameters("")
    pa, pb = dict(pa), dict(pb)
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


def cmd_ensemble(cfg: ExperimentConfig, base_path, adapter_paths) -> Path:
    if len(adapter_paths) < 2:
        raise ValueError(f"an ensemble needs at least two adapter checkpoints, got {len(adapter_paths)}")
    cfg.require(*TRAINING_KEYS)
    model = load_checkpoint(base_path)
    if model.adapters:
        raise ValueError(f"{base_path}: base checkpoint already carries adapters")
    for path in adapter_paths:
        part = load_checkpoint(path)
        if not part.adapters:
            raise ValueError(f"{path}: checkpoint has no adapter")
        if part.latent_dim != model.latent_dim:
            raise ValueError(f"{path}: latent dimension mismatch, adapter checkpoint has "
                             f"{part.latent_dim}, base extractor has {model.latent_dim}")
        if part.input_dim != model.input_dim:
            raise ValueError(f"{path}: input dimension mismatch, {part.input_dim} vs {model.input_dim}")
        if not _same_extractor(part, model):
            raise ValueError(f"{path}: adapter was trained against a different base extractor")
        for adapter in part.adapters:
            model.add_adapter(adapter)
    train, _ = load_datasets(cfg)
    _check_dims(model, train)
    tc = _train_config(cfg, 0.0, sigma_mixture=cfg.mixture, reinit_head=cfg.reinit_head)
    report = finetune_ensemble(model, train, tc, verbose=True)
    sigmas = ",".join(_fmt(a.trained_sigma) for a in model.adapters)
    print(f"adapters={len(model.adapters)} trained_sigmas={sigmas} "
          f"clean_accuracy={report.clean_accuracy:.6f} noisy_accuracy={report.noisy_accuracy:.6f}")
    return _write_checkpoint(model, cfg, "ensemble.ckpt")


# certification and curves


def _check_dims(model: AdaptiveModel, data: Dataset) -> None:
    if data.dimension != model.input_dim:
        raise ValueError(f"dataset dimension {data.dimension} does not match model input width {model.input_dim}")
    if data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model has {model.num_classes}")


def certify_rows(cfg: ExperimentConfig, model: AdaptiveModel, test: Dataset) -> list[list[str]]:
    params = CertifyParams(cfg.n0, cfg.n, cfg.alpha, cfg.cert_batch_size, cfg.radius_mode)
    outcomes = certify_dataset(model, test, NoiseModel(cfg.sigma), params, Stream(cfg.seed, ("noise",)),
                               workers=cfg.workers, limit=cfg.certify_limit)
    rows = []
    for i, (o, y) in enumerate(zip(outcomes, test.labels)):
        rows.append([str(i), str(int(y)), o.decision, str(o.cls) if o.certified else "",
                     _fmt(o.p_lower), _fmt(o.radius if o.certified else 0.0),
                     str(cfg.n0), str(cfg.n), _fmt(cfg.alpha), _fmt(cfg.sigma), str(cfg.seed)])
    return rows


def cmd_certify(cfg: ExperimentConfig, model_path) -> Path:
    if not cfg.sigma > 0:
        raise ConfigError("certification needs sigma > 0", "sigma")
    model = load_checkpoint(model_path)
    _, test = load_datasets(cfg)
    if len(test) == 0:
        raise ValueError("the test split is empty")
    _check_dims(model, test)
    rows = certify_rows(cfg, model, test)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "certify.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CERT_HEADER)
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    model_crc = zlib.crc32(Path(model_path).read_bytes())
    meta = [f"radius_mode = {cfg.radius_mode}", f"model_crc32 = {model_crc:08x}",
            f"dataset = {cfg.dataset}", f"points = {len(rows)}"]
    if cfg.radius_mode == "two_class":
        meta.append("runner_up_bound = min(clopper_pearson_upper(runner-up count), 1 - p_lower)")
    (out / "certify.csv.meta").write_text("\n".join(meta) + "\n")
    certified = sum(r[2] == "certified" for r in rows)
    correct = sum(r[2] == "certified" and r[3] == r[1] for r in rows)
    print(f"wrote {path} points={len(rows)} certified={certified} certified_correct={correct}")
    return path


def read_certification(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CERT_HEADER:
        raise ValueError(f"{path}: schema mismatch, expected header {','.join(CERT_HEADER)}")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no certification rows")
    try:
        ok = np.array([r[2] == "certified" and r[3] == r[1] for r in body])
        radius = np.array([float(r[5]) for r in body])
        keys = [(r[0], r[1]) for r in body]
        sigmas = {r[9] for r in body}
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed certification row") from None
    return {"ok": ok, "radius": radius, "keys": keys, "sigma": ",".join(sorted(sigmas))}


def curve_values(cert: dict, radii) -> list[float]:
    return [float(np.mean(cert["ok"] & (cert["radius"] >= r))) for r in radii]


def cmd_curve(paths, radii, out_dir) -> Path:
    if not paths:
        raise ValueError("curve needs at least one certification CSV")
    radii = [float(r) for r in radii]
    if any(r < 0 for r in radii) or radii != sorted(radii):
        raise ValueError("radii must be non-negative and ascending")
    certs = [read_certification(p) for p in paths]
    for p, c in zip(paths[1:], certs[1:]):
        if c["keys"] != certs[0]["keys"]:
            raise ValueError(f"{p}: schema mismatch, certified points differ from {paths[0]}")
    n_points = len(certs[0]["keys"])
    curves = [curve_values(c, radii) for c in certs]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if len(certs) == 1:
        writer.writerow(CURVE_HEADER)
        writer.writerows([_fmt(r), _fmt(a), n_points] for r, a in zip(radii, curves[0]))
    else:
        writer.writerow(CURVE_HEADER + ["curve"])
        names = []
        for k, c in enumerate(certs):
            name = f"sigma={c['sigma']}"
            names.append(name if name not in names else f"{name}#{k}")
        for name, values in zip(names, curves):
            writer.writerows([_fmt(r), _fmt(a), n_points, name] for r, a in zip(radii, values))
        envelope = np.max(curves, axis=0)
        writer.writerows([_fmt(r), _fmt(a), n_points, "envelope"] for r, a in zip(radii, envelope))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "curve.csv"
    path.write_text(buf.getvalue())
    print(f"wrote {path}")
    return path


def cmd_gradcheck(seed: int) -> bool:
    text, ok = gradcheck.report(gradcheck.run(seed))
    print(text)
    return ok


# argument handling


def _parse_radii(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad radii list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caf", description="Certifying adapters with randomized smoothing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    common(sub.add_parser("pretrain", help="clean pretraining of extractor and head"))
    p = sub.add_parser("train-adapter", help="train one adapter at the config sigma")
    common(p)
    p.add_argument("--base", required=True, help="pretrained checkpoint")
    p = sub.add_parser("certify", help="certify the test split")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint to certify")
    p = sub.add_parser("curve", help="certified accuracy curve from certification CSVs")
    common(p, config_required=False)
    p.add_argument("inputs", nargs="+", help="certification CSV files")
    p.add_argument("--radii", type=_parse_radii, help="comma separated radius grid")
    p = sub.add_parser("ensemble", help="assemble adapters and fine-tune the ensemble")
    common(p)
    p.add_argument("--base", required=True, help="pretrained checkpoint")
    p.add_argument("--adapters", nargs="+", required=True, help="single-adapter checkpoints")
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"), config_required=False)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def run(args) -> int:
    cfg = _config(args)
    if args.command == "pretrain":
        cmd_pretrain(cfg)
    elif args.command == "train-adapter":
        cmd_train_adapter(cfg, args.base)
    elif args.command == "certify":
        cmd_certify(cfg, args.model)
    elif args.command == "curve":
        cmd_curve(args.inputs, args.radii if args.radii is not None else cfg.radii_grid, cfg.output_dir)
    elif args.command == "ensemble":
        cmd_ensemble(cfg, args.base, args.adapters)
    elif args.command == "gradcheck":
        return 0 if cmd_gradcheck(cfg.seed) else 1
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those count as validation errors here
        return 1 if exc.code == 2 else int(exc.code or 0)
    try:
        return run(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
