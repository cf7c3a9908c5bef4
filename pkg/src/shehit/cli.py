"""Command-line entry point: ``shehit <task> --manifest FILE [--out DIR] [--seed N]``."""

import argparse
import sys

from . import runner
from .manifest import ManifestError, load_manifest

COMMANDS = {
    "sample": "sample",
    "cov-audit": "covariance_audit",
    "hitprob": "hitprob",
    "capacity": "capacity",
    "dimension": "dimension",
    "modulus": "modulus",
    "girsanov": "girsanov",
    "verify-all": "verify_all",
}


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="shehit", description="Run one experiment manifest.",
                                 epilog="exit status: 0 ok, 1 failed criteria, 2 bad manifest "
                                        "or I/O, 3 numeric task failure")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd, task in COMMANDS.items():
        p = sub.add_parser(cmd, help=f"run a {task} manifest")
        p.add_argument("--manifest", required=cmd != "verify-all",
                       help="experiment manifest" + (" (built-in quick defaults if omitted)"
                                                     if cmd == "verify-all" else ""))
        p.add_argument("--out", help="output directory (default: manifest output or out/<name>)")
        p.add_argument("--seed", type=_seed, help="override the manifest seed")
    p = sub.add_parser("run", help="run whatever task the manifest names")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=_seed)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.manifest is None:
            m = runner.default_manifest()
        else:
            m = load_manifest(args.manifest)
        task = COMMANDS.get(args.command, m.task)
        if m.task != task:
            line = m.text.splitlines()
            where = next((i + 1 for i, s in enumerate(line) if s.split("#")[0].strip()
                          .replace(" ", "").startswith("task=")), 0)
            raise ManifestError(m.source, where, "task",
                                f"manifest declares {m.task!r} but the command runs {task!r}")
        if args.seed is not None:
            m = m.with_seed(args.seed)
        out, extra = runner.run(m, args.out)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except runner.TaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {out}")
    if extra.get("_failed"):
        print(f"failed criteria: {extra['_failed']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
