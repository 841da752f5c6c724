"""Command-line entry point: ``condlr {train,compare,attack,audit,verify,data gen}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (including failed verification checks).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, experiment
from .config import load_config
from .errors import ConfigError, DataError, InfeasibleRankError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _config_args(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key (repeatable; wins over the file)")
    for flag, key in (("--variant", "variant"), ("--tau", "tau"), ("--epochs", "epochs"),
                      ("--lr", "lr"), ("--momentum", "momentum"), ("--init", "init"),
                      ("--alpha", "alpha"), ("--seed", "seed")):
        p.add_argument(flag, dest=f"opt_{key}", metavar=key.upper())


def _gather(args):
    overrides = list(args.overrides)
    for key, value in vars(args).items():
        if key.startswith("opt_") and value is not None:
            overrides.append(f"{key[4:]}={value}")
    return overrides


def build_parser():
    parser = _Parser(prog="condlr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train one configuration")
    _config_args(p)
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("compare", help="train several variants on the same data")
    _config_args(p)
    p.add_argument("--variants", default="condlr,vanilla_uv",
                   help="comma-separated variant tags; condlr:<tau> sets tau")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("attack", help="FGSM robust accuracy of a checkpoint")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", help="comma-separated budgets (default: config epsilons)")
    p.add_argument("--csv", help="write the report here instead of stdout")

    p = sub.add_parser("audit", help="conditioning report of a checkpoint")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", type=int, default=0,
                   help="compare the bound with sampled local condition numbers at this many test inputs")
    p.add_argument("--csv", help="write the per-layer table as CSV")

    p = sub.add_parser("verify", help="numerical checks of the theory")
    p.add_argument("--suite", action="append", choices=experiment.SUITES,
                   help="suite to run (repeatable; default all)")
    p.add_argument("--lam", type=float, help="theorem2 step (default: largest admissible)")
    p.add_argument("--csv", help="write the result table as CSV")

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_command", parser_class=_Parser)
    dsub.required = True
    g = dsub.add_parser("gen", help="write a synthetic blob dataset as IDX files")
    g.add_argument("--out", required=True, help="data root; files go to <out>/mnist/")
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=784)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    return parser


def _print(quiet):
    return None if quiet else (lambda msg: print(msg, flush=True))


def cmd_train(args):
    cfg = load_config(args.config, _gather(args))
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    res = experiment.run_train(cfg, log=_print(args.quiet))
    s = res.summary
    print(f"{s['variant']}: clean {s['final_clean_acc']:.4f}, cond_prod {s['final_cond_prod']:.4g}, "
          f"compression {s['compression_total']:.4f} -> {cfg.out_dir}")
    return EXIT_OK


def cmd_compare(args):
    base = load_config(args.config, _gather(args))
    configs, labels = [], []
    for item in args.variants.split(","):
        tag, _, tau = item.strip().partition(":")
        cfg = base.replace(variant=tag, **({"tau": float(tau)} if tau else {}))
        configs.append(cfg)
        labels.append(tag + (f"-tau{cfg.tau:g}" if tag == "condlr" else ""))
    results = experiment.run_compare(configs, args.out, labels, log=_print(args.quiet))
    for label, res in results.items():
        s = res.summary
        print(f"{label:>18}: clean {s['final_clean_acc']:.4f}  cond_prod {s['final_cond_prod']:.4g}")
    print(f"wrote {Path(args.out) / 'compare.csv'}")
    return EXIT_OK


def cmd_attack(args):
    cfg = load_config(args.config, _gather(args))
    eps = tuple(float(e) for e in args.eps.split(",")) if args.eps else cfg.epsilons
    _, test = experiment.load_datasets(cfg)
    report = experiment.run_attack(args.checkpoint, test, eps)
    text = "epsilon,robust_acc\n" + "".join(
        f"{e:g},{a!r}\n" for e, a in zip(report.epsilons, report.accuracy))
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_audit(args):
    points = None
    if args.points:
        cfg = load_config(args.config, _gather(args))
        _, test = experiment.load_datasets(cfg)
        points = test.features[: args.points]
    report = experiment.run_audit(args.checkpoint, points)
    if args.csv:
        Path(args.csv).write_text(report.csv())
    sys.stdout.write(report.text())
    return EXIT_OK


def cmd_verify(args):
    results = experiment.run_verify(tuple(args.suite or experiment.SUITES), lam=args.lam)
    table = experiment.verify_csv(results)
    if args.csv:
        Path(args.csv).write_text(table)
    for r in results:
        print(f"{r.status:>13}  {r.suite:<12} {r.name:<52} {r.value:.4g} (threshold {r.threshold:.4g})")
    if any(r.status == "not_certified" for r in results):
        print("warning: some theorem2 runs exceed the admissible step and were not certified",
              file=sys.stderr)
    failed = [r for r in results if r.failed]
    print(f"{len(results) - len(failed)} of {len(results)} checks without failure")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_data(args):
    ds = data.synth_blobs(args.per_class, args.classes, args.dim, args.separation, args.seed)
    train, test = data.split(ds, args.test_fraction, args.seed)
    root = Path(args.out) / "mnist"
    root.mkdir(parents=True, exist_ok=True)
    for part, prefix in ((train, "train"), (test, "t10k")):
        images, labels = data.to_idx_arrays(part)
        data.write_idx(root / f"{prefix}-images-idx3-ubyte.gz", images)
        data.write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(train)} train / {len(test)} test samples to {root}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "attack": cmd_attack,
            "audit": cmd_audit, "verify": cmd_verify, "data": cmd_data}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InfeasibleRankError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
