"""Command line interface: ``gsnf {synth,train,eval,verify,bound}``.

Every command prints JSON records, one per line, on stdout. Exit status is 0
on success, 1 when a numerical or invariant check fails and 2 for usage or
input validation errors.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data import (SynthSpec, baseline_separability, collate, compute_stats, generate_synthetic,
                   load_dataset, normalize_impute, save_dataset, split)
from .exceptions import ContractViolation, GSNFError, NumericError, UndefinedMetricError
from .generation import ItgConfig
from .metrics import auprc, auroc
from .training import (TrainConfig, fit, load_checkpoint, parameter_hash, predict_proba,
                       save_checkpoint)
from .verify import SUITES

THREADS_ENV = "GSNF_NUM_THREADS"

log = logging.getLogger("gsnf")


class UsageError(Exception):
    pass


def emit(record, stream=None):
    stream = sys.stdout if stream is None else stream
    stream.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
    stream.flush()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serialisable: {type(x).__name__}")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def load_config(args):
    values = _read_json(args.config) if args.config else {}
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    for flag, key in (("seed", "seed"), ("margin_mode", "margin_mode"), ("delta", "fixed_delta"),
                      ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------- commands

def cmd_synth(args):
    spec_dict = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    if args.out is None:
        raise UsageError("--out is required")
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    labels, counts = np.unique(ds.labels, return_counts=True)
    observed = float(np.mean([s.mask.mean() for s in ds])) if len(ds) else float("nan")
    emit({"records": len(ds), "path": str(args.out),
          "class_counts": {str(k): int(c) for k, c in zip(labels, counts)},
          "observed_fraction": observed,
          "baseline_accuracy": baseline_separability(ds, seed=spec.seed) if len(ds) >= 4 else None})
    return 0


def _prepare(path, seed):
    ds = load_dataset(_require_file(path, "data"))
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    train, val, test = split(ds, seed=seed)
    stats = compute_stats(train)
    return normalize_impute(train, stats), normalize_impute(val, stats), normalize_impute(test, stats), stats


def cmd_train(args):
    config = load_config(args)
    train, val, test, stats = _prepare(args.data, config.seed)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        result = fit(train, val, config, on_epoch=lambda rec: emit(rec, fh))
    model = result.state.model
    digest = save_checkpoint(out / "checkpoint.npz", model, config, stats,
                             extra={"best_epoch": result.best_epoch})
    if config.margin_mode == "derived" and result.state.delta_trace:
        with open(out / "margin_trace.jsonl", "w") as fh:
            for step, value in enumerate(result.state.delta_trace):
                emit({"step": step, "delta_lb": value}, fh)
    record = {"checkpoint": str(out / "checkpoint.npz"), "hash": digest, "epochs": config.epochs,
              "best_epoch": result.best_epoch}
    if len(test):
        record.update(_scores(model, test, config.eval_batch_size, strict=False))
    emit(record)
    return 0


def _scores(model, ds, batch_size, strict=True):
    p = predict_proba(model, ds, batch_size)[:, 1]
    out = {}
    for name, fn in (("auroc", auroc), ("auprc", auprc)):
        try:
            out[name] = fn(p, ds.labels)
        except UndefinedMetricError:
            if strict:
                raise
            out[name] = None
    return out


def cmd_eval(args):
    model, config, stats, meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    ds = load_dataset(_require_file(args.data, "data"))
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    ds = normalize_impute(ds, stats)
    emit({"n": len(ds), "hash": parameter_hash(model), **_scores(model, ds, config.eval_batch_size)})
    return 0


def cmd_verify(args):
    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    failed = 0
    for name in names:
        kwargs = {"scale": args.scale}
        if args.seed is not None and name != "gradients":
            kwargs["seed"] = args.seed
        res = SUITES[name](**kwargs)
        emit(res.record())
        failed += not res.passed
    emit({"suites": len(names), "failed": failed})
    return 1 if failed else 0


def cmd_bound(args):
    model, config, stats, meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    ds = load_dataset(_require_file(args.data, "data"))
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    ds = normalize_impute(ds, stats)
    delta = config.fixed_delta if args.delta is None else args.delta
    itg = ItgConfig(config.reinit_index, "derived", delta)
    if len(model.stack.layers) != 1:
        log.warning("checkpoint has %d flow layers; the bound uses the first layer's graph weight",
                    len(model.stack.layers))
    zero = total = 0
    for i, start in enumerate(range(0, len(ds), config.batch_size)):
        batch = collate(ds.samples[start:start + config.batch_size], model.n_segments)
        b = model.forward(batch, rng=None, itg=itg, weights=config.loss_weights).bound
        n = len(b["bound"])
        zero += int(np.sum(b["fallback"]))
        total += n
        emit({"batch": i, "size": n,
              "delta_in": float(np.mean(b["delta_in"])), "smin_A": float(np.mean(b["smin_A"])),
              "smin_W": float(np.mean(b["smin_W"])), "eta": float(np.mean(b["eta"])),
              "bound": float(np.mean(b["bound"])), "delta_lb": float(np.mean(b["delta_lb"])),
              "fallback_rate": float(np.mean(b["fallback"]))})
    emit({"summary": True, "samples": total, "bound_zero_fraction": zero / total})
    return 0


# ---------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="gsnf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="JSON synthetic spec (defaults apply to missing keys)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output JSON-lines dataset path")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset file (80/10/10 split)")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--data", help="JSON-lines dataset")
    t.add_argument("--out", help="output directory (default: ./run)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--margin-mode", choices=["fixed", "derived"])
    t.add_argument("--delta", type=float, help="fixed separation margin")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AUROC/AUPRC of a checkpoint on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--seed", type=int)
    v.add_argument("--scale", type=float, default=1.0, help="multiplier on configuration counts")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bound", help="stream margin lower-bound records for a checkpoint")
    b.add_argument("--checkpoint")
    b.add_argument("--data")
    b.add_argument("--delta", type=float, help="fallback margin when the bound is zero")
    b.set_defaults(func=cmd_bound)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (NumericError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, GSNFError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
