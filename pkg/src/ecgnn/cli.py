"""Command-line entry point: ``ecgnn {gen,train,eval,dump-attention,gradcheck}``.

Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical
failure. A ``--config`` JSON file may hold any flag by its long name
(dashes or underscores); flags given on the command line win. The seed
falls back to the ``ECGNN_SEED`` environment variable, then to 0.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .datagen import GEN_TASKS, ManifestError, Sizes, generate, label_uniformity, load_dataset, save_dataset
from .numkit import ConfigError, ContractError, ShapeError
from .pipeline import (Adam, Model, ModelConfig, NumericalError, TrainConfig, evaluate, forward, primary_metric,
                       train_epoch)
from .tensorfile import TensorFormatError, atomic_write_bytes
from .validation import check_ablation, check_seed

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "samples": 512, "test_samples": 128, "sizes": "3-8,8-16,4-10", "classes": 4, "choices": 5, "dim": 32,
    "noise": 0.3, "signal_seed": 0, "epochs": 30, "lr": 1e-4, "batch_size": 64, "d": 32, "n_layers": 3,
    "n_steps": 3, "clip": None, "ablate": None, "threads": 1, "points": 100, "params": 20, "task": None,
    "split": "test", "force": False, "full": False,
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag values (flags override it)")
    p.add_argument("--seed", type=int, help="random seed (default: $ECGNN_SEED or 0)")
    p.add_argument("--threads", type=int, help="worker threads for evaluation and file writes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgnn", description="Event-correlated graph networks for video QA.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(g)
    g.add_argument("--task", choices=sorted(GEN_TASKS))
    g.add_argument("--out", type=Path)
    g.add_argument("--samples", type=int, help="training samples")
    g.add_argument("--test-samples", type=int)
    g.add_argument("--sizes", help="caption, frame and question length ranges, e.g. 3-8,8-16,4-10")
    g.add_argument("--classes", type=int, help="answer classes for the word task")
    g.add_argument("--choices", type=int, help="candidates for the choice task")
    g.add_argument("--dim", type=int, help="feature width")
    g.add_argument("--noise", type=float)
    g.add_argument("--signal-seed", type=int, help="seed of the planted codebooks")
    g.add_argument("--force", action="store_true", default=None, help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train a model on a dataset")
    _common(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--ckpt-out", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--d", type=int, help="hidden width")
    t.add_argument("--n-layers", type=int)
    t.add_argument("--n-steps", type=int)
    t.add_argument("--clip", type=float, help="global gradient-norm clip (off by default)")
    t.add_argument("--ablate", action="append", help="vid, cap, cmr, qmmf or mmf; repeat or comma-separate")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(e)
    e.add_argument("--data", type=Path)
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--split", choices=["train", "test", "all"])

    a = sub.add_parser("dump-attention", help="write the attention trace of one sample as JSON")
    _common(a)
    a.add_argument("--data", type=Path)
    a.add_argument("--ckpt", type=Path)
    a.add_argument("--sample", type=int)
    a.add_argument("--out", type=Path)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive (and the model with --full)")
    _common(c)
    c.add_argument("--full", action="store_true", default=None)
    c.add_argument("--task", choices=["word", "number", "choice"])
    c.add_argument("--points", type=int, help="random points per primitive")
    c.add_argument("--params", type=int, help="model parameters sampled with --full")
    c.add_argument("--d", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    opts = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        known = set(vars(args)) - {"command", "config"}
        for key, value in raw.items():
            k = key.replace("-", "_")
            if k not in known:
                raise UsageError(f"config key {key!r} is not a flag of '{args.command}'")
            opts[k] = value
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            opts[key] = value
    for key, value in DEFAULTS.items():
        opts.setdefault(key, value)
    if opts.get("seed") is None:
        opts["seed"] = os.environ.get("ECGNN_SEED", 0)
    try:
        opts["seed"] = check_seed(opts["seed"])
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return opts


def _need(opts: dict, *names: str) -> None:
    missing = [n for n in names if opts.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(opts: dict) -> int:
    _need(opts, "task", "out")
    if opts["task"] not in GEN_TASKS:
        raise UsageError(f"unknown task {opts['task']!r}; expected one of {sorted(GEN_TASKS)}")
    try:
        sizes = Sizes.parse(opts["sizes"]) if isinstance(opts["sizes"], str) else Sizes(*map(tuple, opts["sizes"]))
        ds = generate(opts["task"], opts["seed"], opts["samples"], sizes, n_test=opts["test_samples"],
                      dim=opts["dim"], noise=opts["noise"], n_classes=opts["classes"], n_choices=opts["choices"],
                      signal_seed=opts["signal_seed"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    try:
        save_dataset(ds, opts["out"], force=bool(opts["force"]), threads=opts["threads"])
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    chi2, pvalue = label_uniformity(ds)
    extra = {"word": f" classes={ds.n_classes}", "choice": f" choices={ds.n_choices}"}.get(ds.task, "")
    print(f"task={ds.task} samples={len(ds)} train={len(ds.split('train'))} test={len(ds.split('test'))}"
          f"{extra} label_chi2={chi2:.4f} label_p={pvalue:.4f} out={opts['out']}")
    return EXIT_OK


def _load(path):
    try:
        return load_dataset(path)
    except (ManifestError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _load_model(path) -> Model:
    try:
        return Model.load(path)
    except (OSError, TensorFormatError, ConfigError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _check_compatible(model: Model, ds) -> None:
    cfg = model.config
    if ds.task != cfg.task:
        raise UsageError(f"checkpoint is for the {cfg.task} task but the dataset is {ds.task}")
    for key in ("d_c", "d_v", "d_q"):
        if key in ds.dims and ds.dims[key] != getattr(cfg, key):
            raise UsageError(f"dataset {key}={ds.dims[key]} does not match checkpoint {key}={getattr(cfg, key)}")
    if ds.task == "word" and ds.n_classes != cfg.n_classes:
        raise UsageError(f"dataset has {ds.n_classes} classes, checkpoint expects {cfg.n_classes}")
    if ds.task == "choice" and ds.n_choices != cfg.n_choices:
        raise UsageError(f"dataset has {ds.n_choices} choices, checkpoint expects {cfg.n_choices}")


def _eval_split(ds, name: str):
    if name == "all":
        return ds
    part = ds.split(name)
    return part if len(part) else None


def cmd_train(opts: dict) -> int:
    _need(opts, "data", "ckpt_out")
    ds = _load(opts["data"])
    train = ds.split("train")
    if not len(train):
        raise UsageError(f"{opts['data']} has no training samples")
    held_out = _eval_split(ds, "test")
    try:
        cfg = ModelConfig(task=ds.task, d=opts["d"], n_layers=opts["n_layers"], n_steps=opts["n_steps"],
                          ablate=check_ablation(",".join(opts["ablate"]) if isinstance(opts["ablate"], list)
                                                else opts["ablate"]),
                          n_classes=ds.n_classes or 4, n_choices=ds.n_choices or 5, seed=opts["seed"],
                          **{k: ds.dims[k] for k in ("d_c", "d_v", "d_q") if k in ds.dims})
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    tc = TrainConfig(lr=opts["lr"], batch_size=opts["batch_size"], epochs=opts["epochs"], seed=opts["seed"],
                     clip=opts["clip"])
    model = Model(cfg)
    ckpt = Path(opts["ckpt_out"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    opt = Adam(model.params(), tc.lr, tc.beta1, tc.beta2, tc.eps, tc.clip)
    for epoch in range(1, tc.epochs + 1):
        try:
            entry = train_epoch(list(train), model, opt, epoch=epoch, seed=tc.seed, batch_size=tc.batch_size)
        except NumericalError as exc:
            print(f"error: {exc}; keeping last good checkpoint {ckpt}", file=sys.stderr)
            return EXIT_NUMERIC
        metric = primary_metric(evaluate(held_out or train, model, opts["threads"]), cfg.task)
        model.save(ckpt)
        print(f"epoch={epoch} loss={_fmt(entry.loss)} metric={_fmt(metric)}", flush=True)
    print(f"checkpoint={ckpt}")
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    _need(opts, "data", "ckpt")
    ds = _load(opts["data"])
    model = _load_model(opts["ckpt"])
    _check_compatible(model, ds)
    part = _eval_split(ds, opts["split"])
    if part is None:
        raise UsageError(f"dataset has no {opts['split']} samples")
    metrics = evaluate(part, model, opts["threads"])
    key = "mse" if ds.task == "number" else "accuracy"
    print(f"{key}={_fmt(metrics[key])} n={metrics['n']} split={opts['split']}")
    return EXIT_OK


def attention_trace(model: Model, sample, index: int) -> dict:
    result = forward(sample, model)
    return {
        "sample": index,
        "task": model.config.task,
        "n_steps": model.config.n_steps,
        "answer": None if sample.answer is None else int(sample.answer),
        "prediction": int(result.prediction),
        "traces": [t.to_dict() for t in result.traces],
    }


def cmd_dump_attention(opts: dict) -> int:
    _need(opts, "data", "ckpt", "sample", "out")
    ds = _load(opts["data"])
    model = _load_model(opts["ckpt"])
    _check_compatible(model, ds)
    i = opts["sample"]
    if not 0 <= i < len(ds):
        raise UsageError(f"sample index {i} out of range for {len(ds)} samples")
    doc = attention_trace(model, ds[i], i)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8"))
    print(f"sample={i} steps={len(doc['traces'][0]['steps'])} out={out}")
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    model = sample = None
    if opts["full"]:
        task = opts["task"] or "word"
        ds = generate({"number": "count"}.get(task, task), opts["seed"], 1, dim=opts["dim"])
        model = Model(ModelConfig(task=ds.task, d=opts["d"], d_c=opts["dim"], d_v=opts["dim"], d_q=opts["dim"],
                                  seed=opts["seed"]))
        sample = ds[0]
    report = gradcheck.run(opts["seed"], opts["points"], model, sample, opts["params"])
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"FAIL worst offender: {report.worst_offender()}")
        return EXIT_CHECK
    print("gradcheck passed")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "dump-attention": cmd_dump_attention,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"ecgnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, ContractError) as exc:
        print(f"ecgnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"ecgnn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
