"""Command-line driver.

    moe2pc --spec toy-moe --mode cryptomoe --out reports/ --wan

``--spec`` takes a path or the name of a shipped preset.  The exit status is
nonzero iff any report row fails its check (or the spec is invalid).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, Moe2pcError
from .harness import LAN, WAN, ExperimentSpec, parse_net, preset_names, run
from .shares import CostModel


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moe2pc", description="Run private MoE experiments and emit cost reports.")
    ap.add_argument("--spec", required=True, help=f"spec path or preset ({', '.join(preset_names())})")
    ap.add_argument("--mode", action="append", help="override the spec's modes (repeatable)")
    ap.add_argument("--seed", type=int, help="override the spec seed (u64)")
    ap.add_argument("--cost-model", help="cost-model JSON replacing the default table")
    ap.add_argument("--out", default=".", help="output directory (default: current)")
    ap.add_argument("--format", choices=("csv", "json", "both"), help="report format")
    ap.add_argument("--oracle-check", choices=("on", "off"), default=None)
    net = ap.add_mutually_exclusive_group()
    net.add_argument("--lan", action="store_const", const=LAN, dest="network", help="3 Gbps, 0.2 ms (default)")
    net.add_argument("--wan", action="store_const", const=WAN, dest="network", help="400 Mbps, 40 ms")
    net.add_argument("--net", type=parse_net, dest="network", metavar="BW,RTT", help="bits/s,seconds")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = ExperimentSpec.load(args.spec)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative", field="seed")
        cost = CostModel.load(args.cost_model) if args.cost_model else None
        check = None if args.oracle_check is None else args.oracle_check == "on"
        report = run(spec, seed=args.seed, modes=args.mode, cost_model=cost, oracle_check=check, network=args.network)
    except Moe2pcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in report.write(args.out, args.format or spec.format):
        print(path)
    failed = [r for r in report.rows if not r["passed"]]
    for r in failed:
        print(f"FAIL point {r['point']} ({r['mode']})", file=sys.stderr)
    print(f"{len(report.rows)} rows, {len(failed)} failed, {len(report.skipped)} skipped")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
