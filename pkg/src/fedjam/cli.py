"""``fedjam`` command line: gen, partition, train-fed, train-central, eval, report.

Exit codes: 0 success, 2 configuration/validation error, 3 IO/format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, fed, metrics, nn
from .config import RunConfig
from .dataset import (
    SpectrogramDataset,
    load_dataset,
    load_partition,
    partition_dirichlet,
    partition_iid,
    save_dataset,
    save_partition,
    split_train_test,
)
from .exceptions import ConfigurationError, FormatError
from .siggen import CLASS_NAMES, generate_dataset

log = logging.getLogger("fedjam")

EXIT_CONFIG = 2
EXIT_IO = 3


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def parse_range(text: str):
    """``"20..40"`` -> ``(20.0, 40.0)``."""
    try:
        lo, hi = (float(v) for v in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO..HI, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return (lo, hi)


def _base_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _images(ds: SpectrogramDataset) -> np.ndarray:
    return ds.images[:, None].astype(np.float32) / np.float32(255.0)


def _write_manifest(out_dir: Path, inputs: dict, argv) -> None:
    outputs = {p.name: sha256_file(p) for p in sorted(out_dir.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "fedjam_version": __version__,
        "argv": list(argv),
        "inputs": {str(k): {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _print_histogram(hist) -> None:
    print("client," + ",".join(CLASS_NAMES[: hist.shape[1]]) + ",total")
    for i, row in enumerate(hist):
        print(f"{i}," + ",".join(str(int(v)) for v in row) + f",{int(row.sum())}")


def _test_indices(ds, parts):
    mask = np.ones(len(ds), dtype=bool)
    mask[parts.all_indices()] = False
    return np.flatnonzero(mask)


def _check_partition(ds, parts):
    union = parts.all_indices()
    if union.size and union[-1] >= len(ds):
        raise ConfigurationError(f"partition references record {union[-1]} but the dataset has {len(ds)}")
    parts.validate()


def _model_config(cfg: RunConfig, ds: SpectrogramDataset) -> nn.CnnConfig:
    from dataclasses import replace

    model = replace(cfg.model, input_h=ds.height, input_w=ds.width, num_classes=ds.num_classes)
    model.validate()
    return model


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    cfg = _base_config(args).override(
        data=dict(per_class=args.per_class, img_h=args.img, img_w=args.img, gen_seed=args.seed),
        generation=dict(jsr_db_range=args.jsr_db, num_samples=args.num_samples, binarize=args.binarize or None),
    )
    d = cfg.data
    records = generate_dataset(
        d.per_class, gen=cfg.generation, stft=cfg.stft, out_dims=(d.img_h, d.img_w), master_seed=d.gen_seed
    )
    ds = SpectrogramDataset.from_records(records, num_classes=len(CLASS_NAMES))
    out = Path(args.out)
    save_dataset(ds, out)
    cfg.save(out.with_name(out.name + ".toml"))
    for name, count in zip(CLASS_NAMES, ds.class_counts()):
        print(f"{name}: {count}")
    print(f"sha256 {sha256_file(out)}  {out}")


def cmd_partition(args) -> None:
    cfg = _base_config(args).override(
        data=dict(
            num_clients=args.clients,
            partition_mode=args.mode,
            beta=args.beta,
            partition_seed=args.seed,
            test_fraction=args.test_fraction,
            split_seed=args.split_seed if args.split_seed is not None else args.seed,
        )
    )
    d = cfg.data
    ds = load_dataset(args.data)
    train_idx, _ = split_train_test(ds.labels, d.test_fraction, d.split_seed)
    if d.partition_mode == "iid":
        parts = partition_iid(train_idx, d.num_clients, d.partition_seed, labels=ds.labels)
    elif d.partition_mode == "dirichlet":
        parts = partition_dirichlet(train_idx, ds.labels, d.num_clients, d.beta, d.partition_seed)
    else:
        raise ConfigurationError(f"unknown partition mode {d.partition_mode!r}")
    out = Path(args.out)
    save_partition(parts, out)
    cfg.save(out.with_name(out.name + ".toml"))
    _print_histogram(parts.histogram(ds.labels, ds.num_classes))


def _finish_run(out_dir, params, records, cm, summary, cfg, inputs, argv):
    nn.save_params(params, out_dir / "weights.fjwt")
    metrics.write_curves(records, out_dir / "curves.csv")
    metrics.write_confusion(cm, out_dir / "confusion.csv")
    metrics.write_summary(summary, out_dir / "run.json")
    cfg.save(out_dir / "config.toml")
    _write_manifest(out_dir, inputs, argv)
    print(json.dumps(summary))


def cmd_train_fed(args) -> None:
    cfg = _base_config(args).override(
        train=dict(learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed),
        fed=dict(
            rounds=args.rounds,
            local_epochs=args.local_epochs,
            eval_every=args.eval_every,
            checkpoint_every=args.checkpoint_every,
        ),
    )
    ds = load_dataset(args.data)
    parts = load_partition(args.parts)
    _check_partition(ds, parts)
    model = _model_config(cfg, ds)
    cfg = cfg.override(
        model=dict(input_h=model.input_h, input_w=model.input_w, num_classes=model.num_classes),
        data=dict(num_clients=parts.num_clients, partition_mode=parts.mode, beta=parts.beta, partition_seed=parts.seed),
    )
    fed_cfg = fed.FedConfig(
        num_clients=parts.num_clients,
        rounds=cfg.fed.rounds,
        local_epochs=cfg.fed.local_epochs,
        train=cfg.train,
        eval_every=cfg.fed.eval_every,
        seed=cfg.train.seed,
        checkpoint_every=cfg.fed.checkpoint_every,
    )
    fed_cfg.validate()
    test_idx = _test_indices(ds, parts)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x, y = _images(ds), ds.labels.astype(np.int64)
    params, records = fed.run_fedavg(
        x,
        y,
        parts,
        model,
        fed_cfg,
        test_idx,
        n_jobs=fed.resolve_jobs(args.jobs),
        checkpoint_dir=out_dir,
        clock=None if args.no_wall_clock else fed.time.perf_counter,
        on_round=lambda r: log.info("round %d accuracy %.4f loss %.4f", r.round, r.accuracy, r.loss),
    )
    _, _, cm = metrics.evaluate(params, x[test_idx], y[test_idx], model)
    summary = metrics.run_summary(parts.mode, parts.num_clients, fed_cfg.rounds, cm, beta=parts.beta)
    _finish_run(out_dir, params, records, cm, summary, cfg, {"data": args.data, "parts": args.parts}, args.argv)


def cmd_train_central(args) -> None:
    cfg = _base_config(args).override(
        train=dict(learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed, epochs=args.epochs),
        data=dict(test_fraction=args.test_fraction, split_seed=args.split_seed),
        fed=dict(eval_every=args.eval_every),
    )
    ds = load_dataset(args.data)
    inputs = {"data": args.data}
    if args.parts:
        parts = load_partition(args.parts)
        _check_partition(ds, parts)
        train_idx, test_idx = parts.all_indices(), _test_indices(ds, parts)
        inputs["parts"] = args.parts
    else:
        train_idx, test_idx = split_train_test(ds.labels, cfg.data.test_fraction, cfg.data.split_seed)
    model = _model_config(cfg, ds)
    cfg = cfg.override(model=dict(input_h=model.input_h, input_w=model.input_w, num_classes=model.num_classes))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x, y = _images(ds), ds.labels.astype(np.int64)
    params, records = fed.run_centralized(
        x,
        y,
        train_idx,
        test_idx,
        model,
        cfg.train,
        eval_every=cfg.fed.eval_every,
        clock=None if args.no_wall_clock else fed.time.perf_counter,
        on_round=lambda r: log.info("epoch %d accuracy %.4f loss %.4f", r.round, r.accuracy, r.loss),
    )
    _, _, cm = metrics.evaluate(params, x[test_idx], y[test_idx], model)
    summary = metrics.run_summary("centralized", 1, cfg.train.epochs, cm)
    _finish_run(out_dir, params, records, cm, summary, cfg, inputs, args.argv)


def cmd_eval(args) -> None:
    ds = load_dataset(args.data)
    params = nn.load_params(args.weights)
    model = nn.infer_config(params, ds.height, ds.width, args.conv_stride, args.pool_size)
    if model.num_classes != ds.num_classes:
        raise ConfigurationError(f"weights have {model.num_classes} classes, dataset has {ds.num_classes}")
    if args.parts:
        parts = load_partition(args.parts)
        _check_partition(ds, parts)
        idx = _test_indices(ds, parts)
    else:
        idx = np.arange(len(ds))
    x, y = _images(ds)[idx], ds.labels[idx].astype(np.int64)
    acc, loss, cm = metrics.evaluate(params, x, y, model)
    if args.confusion:
        metrics.write_confusion(cm, args.confusion)
    print(json.dumps({"accuracy": acc, "loss": loss, "n": int(len(idx)), "per_class_recall": cm.recalls().tolist()}))


REPORT_FIELDS = ("run", "setting", "M", "beta", "rounds", "final_accuracy")


def cmd_report(args) -> None:
    rows = []
    for item in args.runs:
        path = Path(item)
        if path.is_dir():
            path = path / "run.json"
        with open(path, encoding="utf-8") as fh:
            try:
                summary = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not JSON: {exc.msg}", offset=exc.pos) from None
        row = {"run": str(item), **{k: summary.get(k, "") for k in REPORT_FIELDS[1:]}}
        for name, recall in zip(CLASS_NAMES, summary.get("per_class_recall", [])):
            row[f"recall_{name}"] = recall
        rows.append(row)
    columns = list(REPORT_FIELDS) + [f"recall_{n}" for n in CLASS_NAMES]
    sink = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(sink, fieldnames=columns, lineterminator="\n", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if sink is not sys.stdout:
            sink.close()


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedjam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML file with base settings; flags override it")

    p = sub.add_parser("gen", help="synthesize a spectrogram dataset (FJAM)")
    common(p)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--img", type=int, default=None, help="square image size in pixels")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jsr-db", type=parse_range, default=None, metavar="LO..HI")
    p.add_argument("--num-samples", type=int, default=None)
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="split into train/test and partition train across clients")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--mode", choices=("iid", "dirichlet"), default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    def training(p):
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--no-wall-clock", action="store_true", help="record 0 wall seconds (reproducible CSVs)")
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train-fed", help="FedAvg training")
    training(p)
    p.add_argument("--parts", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--local-epochs", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel clients (default $FEDJAM_JOBS or CPU count)")
    p.set_defaults(func=cmd_train_fed)

    p = sub.add_parser("train-central", help="centralized baseline training")
    training(p)
    p.add_argument("--parts", help="use the union of these shards as the training set")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.set_defaults(func=cmd_train_central)

    p = sub.add_parser("eval", help="evaluate FJWT weights on an FJAM dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--parts", help="evaluate on the records not assigned to any client")
    p.add_argument("--conv-stride", type=int, default=1)
    p.add_argument("--pool-size", type=int, default=2)
    p.add_argument("--confusion", help="also write the confusion CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run.json summaries into one table")
    p.add_argument("runs", nargs="+", help="run directories or run.json files")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"fedjam: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"fedjam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
