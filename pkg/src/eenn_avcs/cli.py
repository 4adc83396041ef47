"""Command-line entry point: ``eenn-avcs <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import classification as cls_
from . import pipeline
from . import verify as verify_mod
from .backbone import extract_features, extract_logits, load_features, load_model, save_features, save_model, train_backbone
from .bayes import fit_exits, save_posteriors
from .config import load_config, parse_list
from .data import ClassificationDataset, generate, load_dataset, save_dataset
from .errors import FormatError, InvalidArgument

log = logging.getLogger("eenn_avcs")


def _overrides(args):
    o = {}

    def put(section, key, value):
        o.setdefault(section, {})[key] = value

    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        o["output"] = args.out
    if getattr(args, "threads", None) is not None:
        o["threads"] = args.threads
    if getattr(args, "alpha", None) is not None:
        put("avcs", "alpha", args.alpha)
    if getattr(args, "parallel", None) is not None:
        put("avcs", "parallel", args.parallel)
    if getattr(args, "multisample", None) is not None:
        put("avcs", "multisample", parse_list(args.multisample, int))
    if getattr(args, "clip", None) is not None:
        put("avcs", "clip", parse_list(args.clip, float))
    if getattr(args, "generator", None) is not None:
        put("dataset", "generator", args.generator)
    if getattr(args, "epochs", None) is not None:
        put("backbone", "epochs", args.epochs)
    return o


def _config(args):
    cfg = load_config(args.config, _overrides(args))
    if getattr(args, "n", None) is not None:
        cfg["dataset"]["params"]["n"] = args.n
    return cfg


def cmd_synth(args):
    cfg = _config(args)
    ds = generate(cfg["dataset"]["generator"], cfg["dataset"]["params"], cfg["dataset"]["seed"])
    path = save_dataset(ds, Path(cfg["output"]) / "dataset.csv")
    print(path)
    return 0


def _dataset(args, cfg):
    path = Path(args.data) if args.data else Path(cfg["output"]) / "dataset.csv"
    return load_dataset(path)


def cmd_train(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = train_backbone(ds, pipeline.train_config(cfg))
    path = save_model(model, Path(cfg["output"]) / "model.json")
    print(path)
    return 0


def cmd_features(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = load_model(args.model or Path(cfg["output"]) / "model.json")
    is_cls = isinstance(ds, ClassificationDataset)
    for split in sorted(set(ds.split.tolist())):
        x, y = ds.subset(split)
        obj = extract_logits(model, x, split) if is_cls else extract_features(model, x, split)
        obj.targets = np.asarray(y, dtype=int if is_cls else float)
        print(save_features(obj, Path(cfg["output"]) / "features" / split))
    return 0


def cmd_fit(args):
    cfg = _config(args)
    fs = load_features(args.features)
    if fs.targets is None:
        raise FormatError(f"{args.features} has no targets.csv", Path(args.features))
    prior = None
    if args.model and cfg["bayes"]["prior_mean"] == "head":
        model = load_model(args.model)
        prior = [model.head_weights(t)[:, 0] for t in range(model.exits)]
    posts, searches = fit_exits(fs, fs.targets, prior, tie=bool(cfg["bayes"]["tie"]))
    print(save_posteriors(posts, Path(cfg["output"]) / "posteriors.json", searches))
    return 0


def cmd_calibrate(args):
    cfg = _config(args)
    lg = load_features(args.logits)
    if lg.targets is None:
        raise FormatError(f"{args.logits} has no targets.csv", Path(args.logits))
    c = cfg["calibration"]
    schedule = cls_.calibrate_taus(lg, lg.targets, c["alpha"], c["seed"])
    print(cls_.save_schedule(schedule, Path(cfg["output"]) / "schedule.json"))
    return 0


def cmd_run(args):
    cfg = _config(args)
    result = pipeline.run_experiment(cfg)
    print(result.out_dir / "metrics.csv")
    return 0


def cmd_verify(args):
    results = verify_mod.run_suites(args.suite, seed=args.seed or 0)
    for r in results:
        print(r.report())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def cmd_report(args):
    _, out = pipeline.report(args.results, args.out)
    print(out / "metrics.csv")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="eenn-avcs", description="Nested anytime-valid prediction sets for early-exit networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, avcs=False):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--generator")
        sp.add_argument("--n", type=int, help="dataset size")
        sp.add_argument("--epochs", type=int)
        if avcs:
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--parallel", type=int, help="number of parallel sequences S")
            sp.add_argument("--multisample", help="comma-separated samples per exit")
            sp.add_argument("--clip", help="lo,hi bounds for regression intervals")
            sp.add_argument("--threads", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the early-exit backbone")
    common(sp)
    sp.add_argument("--data", help="dataset CSV (default: <out>/dataset.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("features", help="export per-exit features or logits for every split")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("fit", help="fit the Bayesian heads on a feature directory")
    common(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--model", help="checkpoint whose heads give the prior mean")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("calibrate", help="choose per-exit thresholds on validation logits")
    common(sp, avcs=True)
    sp.add_argument("--logits", required=True)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("run", help="full experiment")
    common(sp, avcs=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("verify", help="oracle and property suites")
    sp.add_argument("--suite", action="append", choices=sorted(verify_mod.SUITES))
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="recompute metric tables from a results directory")
    sp.add_argument("results")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvalidArgument as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
