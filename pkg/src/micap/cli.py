"""Command-line entry point: ``micap <subcommand> [options]``.

Every run writes ``resolved_config.json`` (defaults, then the ``--config`` file,
then ``--set key.path=value`` overrides) into its output directory.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .captioner import CaptionerConfig, MICCaptioner, attention_map, generate, load_checkpoint
from .corpus import ImageCache, ManifestError, bag_stats, load_manifest, save_image
from .encoder import EncoderConfig
from .probe import Grid, ProbeConfig, grid_search, load_class_folders
from .subspace import Budget, SweepCurve, run_sweep, train_full
from .synthetic import SUBSPACE_TASKS
from .tokenizer import Vocab, decode_tokens, encode_text, train_bpe
from .training import NumericError, TrainConfig, train_mic

log = logging.getLogger("micap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    probe = asdict(ProbeConfig())
    for k in ("decoder_depth", "dropout", "tap", "head"):
        probe.pop(k)
    grid = asdict(Grid())
    return {
        "seed": 0,
        "encoder": asdict(EncoderConfig()),
        "captioner": asdict(CaptionerConfig()),
        "train": asdict(TrainConfig()),
        "tokenizer": {"vocab_size": 4096, "min_frequency": 2},
        "probe": {**probe, "taps": list(grid["taps"]), "depths": list(grid["depths"]),
                  "dropouts": list(grid["dropouts"])},
        "subspace": {"task": "linreg", "d": [1, 2, 4, 8, 16, 32], "steps": None, "lr": None},
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = default_config()
    if config_path:
        try:
            _merge(cfg, json.loads(Path(config_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        nested: dict = {}
        node = nested
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
        _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    try:
        EncoderConfig(**cfg["encoder"]).validate()
        CaptionerConfig(**cfg["captioner"])
        TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _prepare_out(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"subcommand": args.command, "config": cfg,
                "inputs": {k: v for k, v in sorted(vars(args).items())
                           if k not in ("command", "func", "set", "config", "seed", "verbose")}}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _encoder_config(cfg) -> EncoderConfig:
    enc = EncoderConfig(**cfg["encoder"])
    enc.validate()
    return enc


# -- subcommands -------------------------------------------------------------------

def cmd_train(args, cfg):
    bags = load_manifest(_require(args.manifest, "manifest"))
    val_bags = load_manifest(_require(args.val_manifest, "validation manifest")) if args.val_manifest else []
    if args.vocab:
        vocab = Vocab.load(_require(args.vocab, "vocabulary"))
    elif args.train_tokenizer:
        vocab = None
    else:
        raise ConfigError("train needs --vocab or --train-tokenizer")
    task_dirs = [_require(t, "task dataset") for t in args.tasks or []]
    out = _prepare_out(args, cfg)
    if vocab is None:
        vocab = train_bpe([b.caption for b in bags], cfg["tokenizer"]["vocab_size"], cfg["tokenizer"]["min_frequency"])
    vocab.save(out / "vocab.json")
    enc = _encoder_config(cfg)
    tasks = {p.name: load_class_folders(p, enc.input_size) for p in task_dirs}
    cap = CaptionerConfig(**{**cfg["captioner"], "vocab_size": vocab.size})
    model = MICCaptioner(enc, cap, cfg["seed"])
    result = train_mic(model, bags, val_bags, vocab, TrainConfig(**cfg["train"]), cfg["seed"],
                       out_dir=out, tasks=tasks)
    (out / "loss_log.csv").write_text(result.log_csv())
    summary = {"steps": result.steps, "epochs": result.epochs, "best_val_loss": result.best_val,
               "initial_loss": result.log[0]["loss"], "final_loss": result.log[-1]["loss"],
               "stopped_early": result.stopped_early, "tasks": sorted(tasks)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("trained %d steps, loss %.4f -> %.4f", result.steps, summary["initial_loss"], summary["final_loss"])


def cmd_probe(args, cfg):
    ckpt = _require(args.checkpoint, "checkpoint")
    data = _require(args.dataset, "dataset")
    p = cfg["probe"]
    grid = Grid(tuple(p["taps"]), tuple(p["depths"]), tuple(p["dropouts"]), p["hidden_width"])
    if not grid.cells():
        raise ConfigError("probe grid is empty")
    base = ProbeConfig(hidden_width=p["hidden_width"], lr=p["lr"], patience=p["patience"],
                       max_epochs=p["max_epochs"], batch_size=p["batch_size"])
    model, _ = load_checkpoint(ckpt)
    task = load_class_folders(data, model.encoder_config.input_size)
    out = _prepare_out(args, cfg)
    report = grid_search(model.encoder, task, grid, cfg["seed"], base)
    report.model = Path(ckpt).name
    (out / "probe_matrix.csv").write_text(report.to_csv())
    (out / "probe_cells.csv").write_text(report.cells_csv())
    (out / "probe_report.json").write_text(report.to_json() + "\n")
    log.info("selected cell %s", report.selected)


def cmd_intrinsic_dim(args, cfg):
    s = cfg["subspace"]
    if s["task"] not in SUBSPACE_TASKS:
        raise ConfigError(f"unknown subspace task {s['task']!r}; choose from {sorted(SUBSPACE_TASKS)}")
    if s["steps"] is None or s["lr"] is None:
        raise ConfigError("the sweep budget is required: set subspace.steps and subspace.lr")
    d_values = s["d"] if args.d is None else [int(x) for x in args.d.split(",") if x.strip()]
    if any(d < 1 for d in d_values):
        raise ConfigError("subspace dimensions must be >= 1")
    out = _prepare_out(args, cfg)
    task = SUBSPACE_TASKS[s["task"]]()
    budget = Budget(int(s["steps"]), float(s["lr"]))
    baseline = train_full(task, budget, cfg["seed"])
    curve = run_sweep(task, d_values, budget, cfg["seed"], baseline) if d_values else SweepCurve(task.name, baseline)
    (out / "sweep.csv").write_text(curve.to_csv())
    (out / "summary.json").write_text(curve.summary_json() + "\n")
    log.info("baseline %.4f, d_90 %s", baseline, curve.summary()["d_90"])


def cmd_attend(args, cfg):
    ckpt = _require(args.checkpoint, "checkpoint")
    refs = [_require(p, "image") for p in args.images]
    model, meta = load_checkpoint(ckpt)
    vocab = Vocab.load(_require(args.vocab or Path(ckpt).parent / "vocab.json", "vocabulary"))
    cache = ImageCache(model.encoder_config.input_size)
    bag = np.stack([cache(str(r)) for r in refs])
    if args.caption is not None:
        tokens = encode_text(vocab, args.caption, model.config.max_caption_len - 2)
    else:
        tokens = generate(model, bag, model.config.max_caption_len - 2)
    if not 0 <= args.token_index < tokens.length:
        raise IndexError(f"token index {args.token_index} out of range: caption has {tokens.length} tokens "
                         f"(valid: 0..{tokens.length - 1})")
    amap = attention_map(model, bag, tokens, args.token_index)
    out = _prepare_out(args, cfg)
    for i, heat in enumerate(amap.heatmaps):
        peak = heat.max()
        save_image(out / f"heatmap_{i}.png", heat / peak if peak > 0 else heat)
    dump = {"caption": decode_tokens(vocab, tokens), "token_ids": tokens.ids, "token_index": args.token_index,
            "instance_shares": [float(x) for x in amap.shares], "images": [str(r) for r in refs]}
    (out / "caption.json").write_text(json.dumps(dump, indent=2) + "\n")


def cmd_stats(args, cfg):
    bags = load_manifest(_require(args.manifest, "manifest"), resolve=False)
    out = _prepare_out(args, cfg)
    stats = bag_stats(bags)
    (out / "bag_sizes.csv").write_text(stats.to_csv())
    (out / "stats.json").write_text(json.dumps({"bags": stats.total_bags, "images": stats.total_images,
                                                "histogram": {str(k): v for k, v in stats.histogram.items()}},
                                               indent=2) + "\n")
    print(f"{stats.total_bags} bags, {stats.total_images} images")


def cmd_tokenize(args, cfg):
    bags = load_manifest(_require(args.manifest, "manifest"), resolve=False)
    out = _prepare_out(args, cfg)
    t = cfg["tokenizer"]
    vocab = train_bpe([b.caption for b in bags], t["vocab_size"], t["min_frequency"])
    vocab.save(out / "vocab.json")
    lengths = [encode_text(vocab, b.caption).length for b in bags]
    (out / "summary.json").write_text(json.dumps({"vocab_size": vocab.size, "captions": len(bags),
                                                  "max_tokens": max(lengths, default=0),
                                                  "mean_tokens": float(np.mean(lengths)) if lengths else 0.0},
                                                 indent=2) + "\n")


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train the captioner (MTL+MIC with --tasks)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--vocab")
    p.add_argument("--train-tokenizer", action="store_true")
    p.add_argument("--tasks", nargs="*", help="class-folder dataset directories trained jointly")

    p = add("probe", cmd_probe, "probe grid search on frozen encoder features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="class-folder directory with splits.json")

    p = add("intrinsic-dim", cmd_intrinsic_dim, "random-subspace sweep")
    p.add_argument("--d", help="comma-separated subspace dimensions (empty for baseline only)")

    p = add("attend", cmd_attend, "cross-attention heatmaps for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--token-index", type=int, required=True)
    p.add_argument("--caption", help="caption to attend with (default: greedy decoding)")
    p.add_argument("--vocab")

    p = add("stats", cmd_stats, "bag-size table for a manifest")
    p.add_argument("--manifest", required=True)

    p = add("tokenize", cmd_tokenize, "train a BPE vocabulary on manifest captions")
    p.add_argument("--manifest", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ManifestError, IndexError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
