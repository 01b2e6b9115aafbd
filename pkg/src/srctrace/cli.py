"""Command-line entry point.

Subcommands: gen-data, train, embed, eval-eer, probe, project. Each one
prints a JSON document to stdout whose ``config`` member is the effective
configuration; passing that document back via ``--config`` reproduces the
run. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict

from .batching import SamplerConfig
from .errors import DataError, NumericError
from .evaluation import (
    ProbeConfig,
    condition_breakdown,
    evaluate_eer,
    linear_probe,
    project_2d,
    write_confusion_csv,
    write_projection_csv,
)
from .losses import METRIC_LOSSES, MarginConfig
from .network import init_model
from .store import read_embeddings, read_manifest, write_embeddings, write_manifest
from .synthgen import SynthSpec, generate
from .trainer import TrainConfig, embed, load_checkpoint, save_checkpoint, train, write_history

COMMANDS = ("gen-data", "train", "embed", "eval-eer", "probe", "project")

DEFAULTS = {
    "synth": asdict(SynthSpec()),
    "model": {"hidden": [64], "embedding_dim": 50, "activation": "relu", "normalize_output": None},
    "sampler": {
        "mode": None,
        "batch_size": 128,
        "n_classes_per_batch": 4,
        "per_class": 3,
        "drop_last": False,
        "batches_per_epoch": None,
    },
    "train": {
        "epochs": 300,
        "peak_lr": 1e-4,
        "warmup_epochs": 10,
        "momentum": 0.9,
        "eval_interval": 25,
        "loss": "ge2e",
        "eval_bins": None,
    },
    "margin": {"m": 0.3, "s": 30.0},
    "probe": {k: v for k, v in asdict(ProbeConfig()).items() if k != "seed"},
    "eval": {"block_size": 1024},
    "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise DataError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise DataError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise DataError(f"{path}: config must be a JSON object")
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # an echoed run document
        cfg = _merge(cfg, doc)
    if seed is not None:
        cfg["seed"] = seed
    return resolve(cfg)


def resolve(cfg: dict) -> dict:
    """Fill loss-dependent defaults so the echo is fully explicit."""
    metric = cfg["train"]["loss"] in METRIC_LOSSES
    if cfg["sampler"]["mode"] is None:
        cfg["sampler"]["mode"] = "balanced" if metric else "random"
    if cfg["model"]["normalize_output"] is None:
        cfg["model"]["normalize_output"] = cfg["train"]["loss"] != "softmax"
    cfg["synth"]["seed"] = cfg["seed"]
    return cfg


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    train_set, dev_set, manifest = generate(SynthSpec(**cfg["synth"]))
    os.makedirs(args.out, exist_ok=True)
    write_embeddings(train_set, os.path.join(args.out, "train.embf"))
    write_embeddings(dev_set, os.path.join(args.out, "dev.embf"))
    write_manifest(manifest, os.path.join(args.out, "manifest.jsonl"))
    return {"train_rows": train_set.count, "dev_rows": dev_set.count, "out": args.out}


def cmd_train(args, cfg):
    train_set = read_embeddings(args.train)
    dev_set = read_embeddings(args.dev) if args.dev else None
    m = cfg["model"]
    widths = [train_set.dim, *m["hidden"], m["embedding_dim"]]
    model = init_model(widths, seed=cfg["seed"], activation=m["activation"],
                       normalize_output=m["normalize_output"])
    tcfg = TrainConfig(margin=MarginConfig(**cfg["margin"]), seed=cfg["seed"], **cfg["train"])
    sampler = SamplerConfig(seed=cfg["seed"], **cfg["sampler"])
    best, history = train(model, train_set, dev_set, tcfg, sampler)
    save_checkpoint(best, args.out, cfg)
    hist_path = args.history or args.out + ".history.jsonl"
    write_history(history, hist_path)
    last = history[-1] if history else {}
    return {"checkpoint": args.out, "history": hist_path, "epochs": len(history),
            "final_mean_loss": last.get("mean_loss"), "best_dev_eer": best.meta.get("best_dev_eer")}


def cmd_embed(args, cfg):
    model, _ = load_checkpoint(args.checkpoint)
    out = embed(model, read_embeddings(args.input))
    write_embeddings(out, args.out)
    return {"rows": out.count, "dim": out.dim, "out": args.out}


def cmd_eval_eer(args, cfg):
    emb = read_embeddings(args.input)
    bins = None if args.exact or args.bins is None else args.bins
    block = cfg["eval"]["block_size"]
    report = evaluate_eer(emb, bins=bins, block_size=block, threads=args.threads)
    if args.by_condition:
        if not args.manifest:
            raise DataError("--by-condition needs --manifest")
        entries = [e for e in read_manifest(args.manifest) if e.split == args.split]
        report["by_condition"] = condition_breakdown(emb, entries, bins=bins, block_size=block,
                                                     threads=args.threads)
    if args.out:
        _write_json(args.out, report)
    return report


def cmd_probe(args, cfg):
    emb = read_embeddings(args.input)
    pcfg = ProbeConfig(seed=cfg["seed"], **cfg["probe"])
    res = linear_probe(emb, pcfg)
    if args.out:
        write_confusion_csv(args.out, res.confusion, res.class_names)
    return {"accuracy": res.accuracy, "n_train": res.n_train, "n_heldout": res.n_heldout,
            "confusion_csv": args.out}


def cmd_project(args, cfg):
    emb = read_embeddings(args.input)
    coords = project_2d(emb)
    if args.out:
        write_projection_csv(args.out, coords, emb)
    return {"rows": emb.count, "out": args.out}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval-eer": cmd_eval_eer,
    "probe": cmd_probe,
    "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", metavar="PATH")

    p = _Parser(prog="srctrace", description="Embedding-level source tracing toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic train/dev set")

    t = sub.add_parser("train", parents=[common], help="train the embedding network")
    t.add_argument("--train", required=True, metavar="PATH")
    t.add_argument("--dev", metavar="PATH")
    t.add_argument("--history", metavar="PATH")

    e = sub.add_parser("embed", parents=[common], help="run a checkpoint over a feature file")
    e.add_argument("--checkpoint", required=True, metavar="PATH")
    e.add_argument("--input", required=True, metavar="PATH")

    v = sub.add_parser("eval-eer", parents=[common], help="all-pairs cosine EER")
    v.add_argument("--input", required=True, metavar="PATH")
    v.add_argument("--exact", action="store_true")
    v.add_argument("--bins", type=int)
    v.add_argument("--by-condition", action="store_true")
    v.add_argument("--manifest", metavar="PATH")
    v.add_argument("--split", default="dev", choices=("train", "dev", "test"))

    r = sub.add_parser("probe", parents=[common], help="linear probe + confusion matrix")
    r.add_argument("--input", required=True, metavar="PATH")

    j = sub.add_parser("project", parents=[common], help="PCA 2-D projection")
    j.add_argument("--input", required=True, metavar="PATH")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command in ("gen-data", "train", "embed") and not args.out:
            raise UsageError(f"{args.command} requires --out")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    try:
        cfg = load_config(args.config, args.seed)
        result = HANDLERS[args.command](args, cfg)
    except NumericError as exc:
        sys.stderr.write(f"srctrace {args.command}: numeric failure: {exc}\n")
        return 3
    except (DataError, OSError, TypeError, ValueError) as exc:
        sys.stderr.write(f"srctrace {args.command}: {exc}\n")
        return 2
    _emit({"command": args.command, "config": cfg, "result": result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
