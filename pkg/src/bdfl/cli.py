"""Command line entry point: ``bdfl run | topology-check | chain-verify | sweep``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .adversary import ScenarioRejected
from .chain import verify_chain_file
from .overlay import check_snapshot
from .scenario import load_scenario
from .sim import export, run_scenario


def _parse_range(text: str) -> list:
    """``a:b:step`` (inclusive) or a comma list."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise argparse.ArgumentTypeError(f"bad range {text!r}, expected start:stop:step")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        vals = [round(start + i * step, 12) for i in range(n)]
    else:
        vals = [float(p) for p in text.split(",") if p]
    if "." not in text:
        vals = [int(v) for v in vals]
    return vals


def _coerce(template, value):
    if isinstance(template, bool):
        return bool(value)
    if isinstance(template, int):
        return int(value)
    return value


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_overrides(seed=args.seed)
    if args.rounds is not None:
        sc = sc.with_overrides(max_rounds=args.rounds)
    result = run_scenario(sc)
    out = Path(args.out or f"runs/{sc.name}-s{sc.seed}")
    export(result, out)
    s = result.summary
    print(f"{sc.name} seed={sc.seed}: final accuracy {s['final_window_acc']:.4f}, "
          f"expelled [{s['expelled']}], results in {out}")
    return 0 if s["invariant_violations"] == 0 else 3


def cmd_topology_check(args) -> int:
    problems = check_snapshot(args.snapshot)
    for p in problems:
        print(p)
    print("topology ok" if not problems else f"{len(problems)} violation(s)")
    return 1 if problems else 0


def cmd_chain_verify(args) -> int:
    problems = verify_chain_file(args.chain)
    for p in problems:
        print(p)
    print("chain ok" if not problems else f"{len(problems)} problem(s)")
    return 1 if problems else 0


def cmd_sweep(args) -> int:
    base = load_scenario(args.scenario)
    key, _, spec = args.param.partition("=")
    if not spec or not hasattr(base, key):
        print(f"unknown sweep parameter {key!r}", file=sys.stderr)
        return 2
    out = Path(args.out or f"runs/{base.name}-sweep-{key}")
    rows = []
    for value in _parse_range(spec):
        sc = base.with_overrides(**{key: _coerce(getattr(base, key), value)})
        sc.validate()
        result = run_scenario(sc)
        export(result, out / f"{key}={value}")
        s = result.summary
        rows.append({key: value, "final_window_acc": repr(s["final_window_acc"]),
                     "expelled": len(result.sim.expelled_at),
                     "successful_malicious": s["successful_malicious"]})
        print(f"{key}={value}: final accuracy {s['final_window_acc']:.4f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bdfl", description="Blockchain-audited decentralized FL simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one scenario and write its results")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int, help="override max_rounds")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("topology-check", help="validate an exported overlay edge list")
    p.add_argument("--snapshot", required=True)
    p.set_defaults(fn=cmd_topology_check)

    p = sub.add_parser("chain-verify", help="validate an exported chain log")
    p.add_argument("--chain", required=True)
    p.set_defaults(fn=cmd_chain_verify)

    p = sub.add_parser("sweep", help="rerun a scenario over a range of one parameter")
    p.add_argument("--scenario", required=True)
    p.add_argument("--param", required=True, help="key=start:stop:step or key=v1,v2")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ScenarioRejected, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
