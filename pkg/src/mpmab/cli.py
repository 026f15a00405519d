"""Command line entry point: ``mpmab run | gaps | audit``."""
from __future__ import annotations

import argparse
import json
import sys

from . import beacon, harness
from .sim import Trace


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    summary = harness.run_experiment(cfg, out_dir=args.out, workers=args.workers)
    for algo, entry in summary["algorithms"].items():
        print(f"{algo}: {entry['runs']} runs, mean final regret {entry['mean_final_regret']:.4g}")
    return 0


def _cmd_gaps(args) -> int:
    cfg = harness.validate_config(harness.load_config(args.config))
    reports = []
    for name, inst in cfg["instances"]:
        g = harness._gap_json(inst, cfg["reward"])
        reports.append({"instance": name, "K": inst.K, "M": inst.M, "gap_stats": g})
    json.dump({"schema_version": harness.SCHEMA_VERSION, "reward": cfg["reward_cfg"], "instances": reports},
              sys.stdout, indent=2)
    print()
    return 0


def _cmd_audit(args) -> int:
    trace = Trace.load(args.trace)
    report = beacon.mirror_audit(trace)
    json.dump(report.to_json(), sys.stdout, indent=2)
    print()
    if args.wire_log:
        with open(args.wire_log, "w") as fh:
            fh.write("\n".join(beacon.wire_log(trace)) + "\n")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpmab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="output directory (default: output.dir or ./results)")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gaps", help="print gap statistics of the configured instances as JSON")
    g.add_argument("--config", required=True)
    g.set_defaults(func=_cmd_gaps)

    a = sub.add_parser("audit", help="audit a saved BEACON trace")
    a.add_argument("--trace", required=True)
    a.add_argument("--wire-log", default=None, help="also write the per-step channel log here")
    a.set_defaults(func=_cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
