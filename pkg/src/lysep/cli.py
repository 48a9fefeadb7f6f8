"""Command line entry point: ``lysep <gen-data|train|bench|report|check>``.

Settings come from an optional ``--config`` file of ``key = value`` lines;
flags given on the command line override the file. Exit codes: 0 success,
2 configuration error, 3 numerical abort.
"""

import argparse
import dataclasses
import sys

from . import datasets, harness
from .checks import run_checks
from .harness import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ConfigError, RunConfig, RunSummary
from .metrics import NumericalAbort


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value settings file")
    for f in dataclasses.fields(RunConfig):
        if f.name in ("data_cache",):
            continue
        parser.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.name.upper())
    parser.add_argument("--data-cache", dest="data_cache", default=None, metavar="PATH", help="dataset cache file")


def _build_config(args):
    values = harness.read_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(RunConfig):
        given = getattr(args, f.name, None)
        if given is not None:
            values[f.name] = given
    return harness.config_from_mapping(values).validate()


def _print_row(rec):
    parts = [f"iter {rec.iter}", f"ce {rec.ce_loss:.4e}", f"acc {100 * rec.train_acc:.2f}%"]
    if rec.surrogate_loss is not None:
        parts.append(f"surrogate {rec.surrogate_loss:.4e}")
    print("  ".join(parts), flush=True)


def cmd_gen_data(args):
    if args.fetch_mnist:
        datasets.fetch_mnist(args.mnist_dir or ".", args.fetch_mnist)
        print(f"MNIST files verified and written to {args.mnist_dir or '.'}")
        return EXIT_OK
    cfg = _build_config(args)
    train, test = harness.load_data(cfg)
    datasets.save_dataset(args.out, train)
    print(f"wrote {train.n} samples (d={train.dim}, J={train.n_classes}) to {args.out}")
    if args.test_out and test is not None:
        datasets.save_dataset(args.test_out, test)
        print(f"wrote {test.n} test samples to {args.test_out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _build_config(args)
    result = harness.run(cfg, args.out, on_record=None if args.quiet else _print_row)
    if result.monotone_violations:
        print(f"warning: surrogate rose at iterations {result.monotone_violations}", file=sys.stderr)
    final = result.final
    print(f"final: ce_loss={final.ce_loss:.4e} train_acc={100 * final.train_acc:.2f}%")
    return EXIT_OK


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError([f"seeds must be a comma-separated list of integers, got {text!r}"]) from None


def cmd_bench(args):
    cfg = _build_config(args)
    summary = harness.bench(cfg, _parse_seeds(args.seeds), args.out_dir)
    text = summary.to_json()
    if args.summary:
        with open(args.summary, "w") as fh:
            fh.write(text)
    print(harness.report([summary]), end="")
    for seed, msg in summary.failed.items():
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    summaries = []
    for path in args.summaries:
        with open(path) as fh:
            summaries.append(RunSummary.from_json(fh.read()))
    table = harness.report(summaries)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    else:
        print(table, end="")
    return EXIT_OK


def cmd_check(args):
    failed = 0
    for name, ok, detail in run_checks(args.check_seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_OK if not failed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="lysep", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset and write it to a cache file", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--out", default="train.lsds", help="training set cache path")
    p.add_argument("--test-out", default=None, help="test set cache path")
    p.add_argument("--fetch-mnist", default=None, metavar="BASE_URL",
                   help="download the four MNIST .gz files from BASE_URL into --mnist-dir and verify SHA-256")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one seed, logging to CSV", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--out", default=None, help="CSV log path")
    p.add_argument("--quiet", action="store_true", help="print only the final row")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="train several seeds and summarize", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--out-dir", default=None, help="directory for per-seed CSV logs")
    p.add_argument("--summary", default=None, help="write the summary as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="tabulate bench summaries", allow_abbrev=False)
    p.add_argument("summaries", nargs="+", help="summary JSON files")
    p.add_argument("--out", default=None, help="write the table to a file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check", help="run the invariant suite", allow_abbrev=False)
    p.add_argument("--check-seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
