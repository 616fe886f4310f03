"""``spikegest`` command-line interface.

Every command takes ``--config PATH`` (INI, optional), ``--seed U64`` and
``--out DIR``. Metrics go to stdout as one JSON object per line, a human
summary goes to stderr, and the resolved configuration is written to
``DIR/config.ini``. Exit codes: 0 success, 1 runtime failure, 2 config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import bench as bn
from .config import ConfigError, RunConfig, load_config, parse_config, parse_seed
from .signal import (Dataset, DatasetFormatError, SignalError, load_dataset, save_dataset,
                     stratified_split, synth_generate)
from .snn import LAYER_NAMES, CheckpointError, JasnnModel, ShapeError, load_checkpoint, save_checkpoint
from .ssfda import AdaptRecord, adapt
from .training import EpochRecord, evaluate, fit

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("generate", "train", "eval", "adapt", "bench")


class RunError(RuntimeError):
    pass


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, allow_nan=False,
                     default=lambda x: None if isinstance(x, float) and math.isnan(x) else x),
          flush=True)


def _clean(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_csv(path: Path, rows, cls) -> None:
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))


def _prepare_out(cfg: RunConfig, out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
    except OSError as exc:
        raise RunError(f"cannot write to {out}: {exc.strerror}") from None
    return out


def split_file(data_dir, domain: int, split: str) -> Path:
    return Path(data_dir) / f"domain{domain}_{split}.spkg"


def _all_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return stratified_split(synth_generate(cfg.synth_spec()), cfg.data.train_fraction, cfg.seed)


def load_split(cfg: RunConfig, domain: int, split: str) -> Dataset:
    """The ``split`` of ``domain`` from ``data.data_dir`` or, if unset, synthesised in memory."""
    if cfg.data.data_dir:
        return load_dataset(split_file(cfg.data.data_dir, domain, split))
    if not 0 <= domain < cfg.data.num_domains:
        raise RunError(f"domain {domain} outside [0, {cfg.data.num_domains})")
    train, test = _all_splits(cfg)
    return (train if split == "train" else test).select_domain(domain)


def new_model(cfg: RunConfig, in_channels: int, num_classes: int) -> JasnnModel:
    m = cfg.model
    lif = cfg.lif_params()
    return JasnnModel.initialize(cfg.seed, m.init_gain, in_channels=in_channels,
                                 base_channels=m.base_channels, kernel_size=m.kernel_size,
                                 num_classes=num_classes, attention=m.attention, eps=m.eps,
                                 lif={name: lif for name in LAYER_NAMES})


def _checked_checkpoint(path: str, cfg: RunConfig, data: Dataset) -> JasnnModel:
    model = load_checkpoint(path)
    expected = {"in_channels": data.channel_count, "num_classes": data.num_classes,
                "base_channels": cfg.model.base_channels, "kernel_size": cfg.model.kernel_size}
    for name, want in expected.items():
        got = getattr(model, name)
        if got != want:
            raise ShapeError(f"checkpoint {path} has {name}={got}, but config/data imply {want}")
    return model


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    train, test = _all_splits(cfg)
    _prepare_out(cfg, out)
    for d in range(cfg.data.num_domains):
        for split, ds in (("train", train), ("test", test)):
            part = ds.select_domain(d)
            path = split_file(out, d, split)
            save_dataset(part, path)
            _emit({"command": "generate", "domain": d, "split": split, "samples": len(part),
                   "path": str(path)})
    _say(f"generate: {len(train)} train + {len(test)} test samples over "
         f"{cfg.data.num_domains} domains -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .plotting import plot_training

    t = cfg.train
    train = load_split(cfg, t.domain, "train")
    test = load_split(cfg, t.domain, "test")
    model = new_model(cfg, train.channel_count, train.num_classes)
    _prepare_out(cfg, out)

    def log(rec: EpochRecord):
        _emit({"command": "train", **_clean(asdict(rec))})

    model, history = fit(model, train, t.epochs, t.lr, t.batch_size, cfg.seed, test,
                         t.patience, t.min_improvement, callback=log)
    save_checkpoint(model, out / "model.spkm")
    _write_csv(out / "metrics.csv", history, EpochRecord)
    plot_training(history, out / "training.png")
    last = {r.split: r for r in history}
    _say(f"train: {len({r.epoch for r in history})} epochs, train acc "
         f"{last['train'].accuracy:.3f}, test acc {last['test'].accuracy:.3f} -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    e = cfg.eval
    data = load_split(cfg, e.domain, e.split)
    if e.checkpoint:
        model = _checked_checkpoint(e.checkpoint, cfg, data)
    else:
        model = new_model(cfg, data.channel_count, data.num_classes)
    acc, _ = evaluate(model, data)
    _prepare_out(cfg, out)
    record = {"command": "eval", "domain": e.domain, "split": e.split, "samples": len(data),
              "accuracy": acc, "checkpoint": e.checkpoint or None}
    (out / "eval.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    _emit(record)
    _say(f"eval: accuracy {acc:.4f} on domain {e.domain} {e.split} ({len(data)} samples)")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, out: Path) -> int:
    from .plotting import plot_adaptation

    s = cfg.ssfda
    if not s.checkpoint:
        raise ConfigError("ssfda.checkpoint must name the source checkpoint")
    target = load_split(cfg, s.target_domain, "train")
    held_out = load_split(cfg, s.target_domain, "test")
    model = _checked_checkpoint(s.checkpoint, cfg, target)
    _prepare_out(cfg, out)
    before_fit, _ = evaluate(model, target)
    before_test, _ = evaluate(model, held_out)

    def log(rec: AdaptRecord):
        _emit({"command": "adapt", **_clean(asdict(rec))})

    # True labels only feed the agreement/accuracy report, never the loss.
    adapted, history, rebuilds = adapt(model, target.unlabeled(), cfg.ssfda_config(),
                                       eval_labels=target.labels, callback=log)
    after_test, _ = evaluate(adapted, held_out)
    save_checkpoint(adapted, out / "model.spkm")
    _write_csv(out / "adapt_report.csv", history, AdaptRecord)
    plot_adaptation(history, out / "adaptation.png", baseline=before_fit)
    summary = {"command": "adapt", "target_domain": s.target_domain, "rebuilds": rebuilds,
               "target_accuracy_before": before_fit,
               "target_accuracy_after": history[-1].target_accuracy,
               "held_out_accuracy_before": before_test, "held_out_accuracy_after": after_test}
    _emit(summary)
    _say(f"adapt: target accuracy {before_fit:.3f} -> {history[-1].target_accuracy:.3f}, "
         f"held-out {before_test:.3f} -> {after_test:.3f} -> {out}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    from .plotting import plot_scaling

    b = cfg.bench
    for impl in b.impl_list():
        if impl not in bn.IMPLS:
            raise ConfigError(f"bench.impls: unknown implementation {impl!r}")
    _prepare_out(cfg, out)
    records = []
    for impl in b.impl_list():
        for density in b.density_list():
            for n in b.length_list():
                rec = bn.time_attention(impl, n, density, b.reps, cfg.seed)
                records.append(rec)
                _emit({"command": "bench", **asdict(rec)})
    (out / "bench.csv").write_text(bn.records_to_csv(records))
    slopes = bn.scaling_report(records, min_points=2) if len(set(b.length_list())) >= 2 else {}
    (out / "summary.txt").write_text(bn.summary_text(slopes))
    plot_scaling(records, out / "scaling.png", slopes)
    for (impl, density), slope in slopes.items():
        _say(f"bench: {impl} @ density {density:g}: log-log slope {slope:.2f}")
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "adapt": cmd_adapt, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikegest", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="INI configuration file")
    parser.add_argument("--seed", metavar="U64", help="run seed (overrides config and env)")
    parser.add_argument("--out", metavar="DIR", default="spikegest-out", help="run directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = None if args.seed is None else parse_seed(args.seed, "--seed")
        cfg = load_config(args.config, seed) if args.config else parse_config("", seed)
        return HANDLERS[args.command](cfg, Path(args.out))
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except (RunError, CheckpointError, DatasetFormatError, ShapeError, SignalError,
            bn.BenchError, OSError, ValueError) as exc:
        _say(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
