"""Command-line entry point: ``qcontrast {gen-data,train,eval,autocorr}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .autocorr import autocorrelation, decompose_quadratic, learnable_autocorrelation, noise_suppression_report
from .config import RunConfig
from .data import (
    Splits,
    apply_standardization,
    build_long_tail_split,
    default_fault_models,
    generate_signal,
    ingest,
    read_signal,
    standardize,
    write_raw_f32le,
)
from .errors import ConfigurationError, DimensionError, IngestionError, TrainingDiverged
from .qnn import NEURONS, VARIANTS, QuadraticConv1d, build_network, load_checkpoint, save_checkpoint
from .rng import seed_streams
from .tensor import Tensor
from .trainer import confusion_matrix, evaluate, metrics_from_confusion, predict, train, write_stats_csv

log = logging.getLogger("qcontrast")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


# ---------------------------------------------------------------- helpers


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigurationError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigurationError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    if getattr(args, "neuron", None):
        cfg.model.neuron = args.neuron
    if getattr(args, "variant", None):
        cfg.model.variant = args.variant
    if getattr(args, "ib_rate", None) is not None:
        cfg.split.ib_rate = args.ib_rate
    if getattr(args, "alpha", None) is not None:
        cfg.train.alpha = args.alpha
    cfg.validate()
    return cfg


def synthetic_recordings(cfg: RunConfig, rng: np.random.Generator) -> list[np.ndarray]:
    models = default_fault_models(cfg.data.n_classes, cfg.data.noise_std)
    return [generate_signal(m, cfg.data.recording_length, rng) for m in models]


def _recordings(cfg: RunConfig, data_dir, rng: np.random.Generator) -> list[np.ndarray]:
    if data_dir is not None:
        recs, _ = ingest(Path(data_dir) / "manifest.json")
    elif cfg.data.source == "manifest":
        recs, _ = ingest(cfg.data.manifest)
    else:
        return synthetic_recordings(cfg, rng)
    if len(recs) != cfg.data.n_classes:
        raise ConfigurationError(f"dataset has {len(recs)} classes, config says {cfg.data.n_classes}")
    return recs


def build_splits(cfg: RunConfig, data_dir=None) -> Splits:
    """Raw (unstandardized) splits; deterministic given the config and seed."""
    rng = seed_streams(cfg.seed)["data"]
    recs = _recordings(cfg, data_dir, rng)
    return build_long_tail_split(recs, cfg.split, cfg.data.window, rng)


def _write_split_log(path: Path, splits: Splits) -> None:
    with open(path, "w") as fh:
        for name in ("train", "val", "test"):
            counts = getattr(splits, name).counts(splits.n_classes)
            for label, count in enumerate(counts):
                fh.write(f"{name}\tclass {label}\t{count}\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if cfg.data.source != "synthetic":
        raise ConfigurationError("gen-data needs data.source = 'synthetic'")
    out = _prepare_out(Path(args.out or cfg.out_dir), args.force)
    rng = seed_streams(cfg.seed)["data"]
    models = default_fault_models(cfg.data.n_classes, cfg.data.noise_std)
    files = []
    print(f"{'class':>5}  {'period':>6}  {'freq':>5}  {'amplitude':>9}  file")
    for label, model in enumerate(models):
        name = f"class_{label:02d}.f32"
        write_raw_f32le(out / name, generate_signal(model, cfg.data.recording_length, rng))
        files.append({"path": name, "label": label, "format": "raw_f32le"})
        period = "-" if model.amplitude == 0 else str(model.fault_period)
        print(f"{label:>5}  {period:>6}  {model.resonance_freq:>5.2f}  {model.amplitude:>9.2f}  {name}")
    manifest = {"sample_rate": None, "seed": cfg.seed, "noise_std": cfg.data.noise_std, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(cfg.out_dir), args.force)
    cfg.save(out / "config.json")
    splits = standardize(build_splits(cfg, args.data))
    _write_split_log(out / "split.log", splits)
    model_cfg = cfg.model_config()
    try:
        result = train(cfg.train_config(), model_cfg, splits, stats_csv=out / "stats.csv")
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    state = dict(result.best_state)
    state["norm.mean"] = np.array(splits.stats["mean"])
    state["norm.std"] = np.array(splits.stats["std"])
    save_checkpoint(out / "best.ckpt", state, model_cfg.digest())
    write_stats_csv(out / "stats.csv", result.history)
    report = evaluate(result.network, splits.test)
    body = {"split": "test", "best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1, **report.to_dict()}
    (out / "report.json").write_text(json.dumps(body, indent=2) + "\n")
    print(f"test acc={report.acc:.4f} f1={report.f1:.4f} mcc={report.mcc:.4f} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    if args.config is None:
        args.config = run / "config.json"
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "best.ckpt"
    network = build_network(cfg.model_config(), 0)
    extra = load_checkpoint(ckpt, network)
    if "norm.mean" not in extra or "norm.std" not in extra:
        raise ConfigurationError(f"{ckpt}: checkpoint lacks normalization statistics")
    stats = {"mean": float(extra["norm.mean"]), "std": float(extra["norm.std"])}
    test = build_splits(cfg, args.data).test
    x = apply_standardization(test.x, stats)
    logits, emb = predict(network, x)
    pred = logits.argmax(axis=1)
    report = metrics_from_confusion(confusion_matrix(test.y, pred, cfg.data.n_classes))
    out = _prepare_out(Path(args.out) if args.out else run / "eval", args.force)
    (out / "report.json").write_text(json.dumps({"split": "test", **report.to_dict()}, indent=2) + "\n")
    c = cfg.data.n_classes
    _write_rows(out / "confusion.csv", ["true"] + [f"pred_{j}" for j in range(c)], [[i, *row] for i, row in enumerate(report.confusion.tolist())])
    _write_rows(
        out / "features.csv",
        ["label", "pred"] + [f"z{j}" for j in range(emb.shape[1])],
        [[int(y), int(p), *map(repr, map(float, z))] for y, p, z in zip(test.y, pred, emb)],
    )
    print(f"test acc={report.acc:.4f} f1={report.f1:.4f} mcc={report.mcc:.4f} n={len(test)}")
    return 0


def _stem_slice(cfg: RunConfig, ckpt: Path, channel: int) -> QuadraticConv1d:
    if cfg.model.neuron != "quadratic" or cfg.model.variant != "full":
        raise ConfigurationError(
            f"autocorrelation analysis needs a full quadratic stem; checkpoint is {cfg.model.neuron}/{cfg.model.variant}"
        )
    network = build_network(cfg.model_config(), 0)
    load_checkpoint(ckpt, network)
    stem = network.backbone.stem_conv
    if stem.ch_in != 1:
        raise ConfigurationError(
            f"the stem takes {stem.ch_in} input channels; only single-channel slices can be decomposed"
        )
    if not 0 <= channel < stem.ch_out:
        raise ConfigurationError(f"--channel {channel} outside [0, {stem.ch_out})")
    layer = QuadraticConv1d(1, 1, stem.k, stem.stride, stem.padding, "full")
    for name, p in layer.params.items():
        src = stem.params[name].data
        p.data[...] = src[channel : channel + 1, :1] if src.ndim == 3 else src[channel : channel + 1]
    return layer


def _analytic_layer(k: int, weight: float) -> QuadraticConv1d:
    layer = QuadraticConv1d(1, 1, k, 1, 0, "full")
    layer.params["w_r"].data[...] = weight
    layer.params["w_g"].data[...] = weight
    for name in ("b_r", "b_g", "w_b", "c"):
        layer.params[name].data[...] = 0.0
    return layer


def cmd_autocorr(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / "autocorr"), args.force)
    rng = seed_streams(cfg.seed)["data"]
    if args.signal:
        clean = read_signal(args.signal, "csv" if str(args.signal).endswith(".csv") else "raw_f32le")[: args.length]
    else:
        model = default_fault_models(cfg.data.n_classes, 0.0)[args.label]
        clean = generate_signal(model, args.length, rng)

    if args.analytic:
        layer = _analytic_layer(args.kernel, args.weight)
        n = len(clean)
        plain = autocorrelation(clean)
        learned = learnable_autocorrelation(clean, [np.full(n - t, args.weight) for t in range(n)])
        _write_rows(out / "autocorr.csv", ["lag", "autocorr", "learnable_autocorr"], [[t, repr(a), repr(b)] for t, (a, b) in enumerate(zip(plain.tolist(), learned.tolist()))])
    else:
        if not args.checkpoint:
            raise ConfigurationError("autocorr needs --analytic or --checkpoint")
        layer = _stem_slice(cfg, Path(args.checkpoint), args.channel)

    dec = decompose_quadratic(layer, clean)
    pre = layer(Tensor(clean[None, None, :])).data[0, 0]
    _write_rows(
        out / "decomposition.csv",
        ["position", "autocorr_part", "conv_part", "constant", "total", "preactivation"],
        [[j, repr(a), repr(b), repr(dec.constant), repr(t), repr(p)] for j, (a, b, t, p) in enumerate(zip(dec.autocorr_part.tolist(), dec.conv_part.tolist(), dec.total.tolist(), pre.tolist()))],
    )
    report = noise_suppression_report(clean, args.noise_std, args.trials, rng)
    report.to_csv(out / "noise_report.csv")
    print(
        f"reconstruction max |total - preactivation| = {np.abs(dec.total - pre).max():.3e}; "
        f"noise: mean rel dev lags 1..50 = {report.mean_rel_dev(min(50, len(clean) - 1)):.4f}, "
        f"lag-0 inflation {report.lag0_inflation:.1f} (expected {report.expected_lag0_inflation:.1f})"
    )
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (comments allowed)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--neuron", choices=NEURONS)
    model.add_argument("--variant", choices=VARIANTS)
    model.add_argument("--ib-rate", type=float, dest="ib_rate")
    model.add_argument("--alpha", type=float)

    parser = argparse.ArgumentParser(prog="qcontrast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic recordings and a manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, model], help="train and write a run directory")
    p.add_argument("--data", type=Path, help="dataset directory holding manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, model], help="score a checkpoint on the test split")
    p.add_argument("run", type=Path, help="run directory written by 'train'")
    p.add_argument("--checkpoint", type=Path, help="defaults to RUN/best.ckpt")
    p.add_argument("--data", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("autocorr", parents=[common, model], help="autocorrelation decomposition and noise report")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--analytic", action="store_true", help="use a fixed analytic layer")
    mode.add_argument("--checkpoint", type=Path, help="decompose a channel of the trained stem")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--weight", type=float, default=1.0)
    p.add_argument("--signal", type=Path, help="CSV or raw_f32le signal (default: synthetic, noise-free)")
    p.add_argument("--label", type=int, default=1, help="synthetic class to analyse")
    p.add_argument("--length", type=int, default=2048)
    p.add_argument("--noise-std", type=float, default=1.0, dest="noise_std")
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_autocorr)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
