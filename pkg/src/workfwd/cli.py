"""Command-line entry point: ``workfwd {bench,streamlines,nbody,selftest}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

TRANSPORTS = ("in_process", "socket")


class UsageError(Exception):
    """Bad flag values that argparse cannot catch on its own (exit 2)."""


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated counts, got {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("counts must be non-negative")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="workfwd",
                                description="Sort-middle work forwarding: benchmark and demo applications.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="{bench,streamlines,nbody,selftest}")

    b = sub.add_parser("bench", help="forwarding throughput sweep, CSV output")
    b.add_argument("--ranks", type=_positive_int, default=4, help="number of ranks (default 4)")
    b.add_argument("--items", type=_int_list, default=[1000, 10000, 100000],
                   help="comma-separated items per rank to sweep (default 1000,10000,100000)")
    b.add_argument("--payload-bytes", type=int, default=44, help="bytes per item, >= 8 (default 44)")
    b.add_argument("--rounds", type=int, default=5, help="timed rounds per point, >= 5 (default 5)")
    b.add_argument("--pattern", default="uniform_random",
                   choices=["uniform_random", "ring", "all_to_one", "self"])
    b.add_argument("--transport", default="in_process", choices=TRANSPORTS)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default: standard output)")

    s = sub.add_parser("streamlines", help="distributed streamline tracing")
    s.add_argument("--field", default="abc:64",
                   help="header JSON path, or abc:N, rotation:N, constant:N:vx,vy,vz (default abc:64)")
    s.add_argument("--seeds", default="random:100:0",
                   help="text file of 'x y z' rows, or random:N:SEED (default random:100:0)")
    s.add_argument("--ranks", type=_positive_int, default=1)
    s.add_argument("--h", type=float, default=None, help="RK4 step (default: quarter grid spacing)")
    s.add_argument("--max-steps", type=int, default=1000)
    s.add_argument("--transport", default="in_process", choices=TRANSPORTS)
    s.add_argument("--out", help="output path, lines 'id x y z' (default: standard output)")

    n = sub.add_parser("nbody", help="distributed Barnes-Hut simulation")
    n.add_argument("--n", type=_positive_int, default=512, help="particle count")
    n.add_argument("--ranks", type=_positive_int, default=1)
    n.add_argument("--steps", type=int, default=10)
    n.add_argument("--theta", type=float, default=0.5)
    n.add_argument("--dt", type=float, default=1e-3)
    n.add_argument("--softening", type=float, default=None,
                   help="softening length (default: 1e-2 of the domain size)")
    n.add_argument("--quadrupole", action="store_true", help="add quadrupole corrections")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--distribution", default="uniform", choices=["uniform", "plummer"])
    n.add_argument("--snapshot-every", type=int, default=0, metavar="K",
                   help="write an 'x y z m' snapshot every K steps")
    n.add_argument("--snapshot-dir", default="snapshots")
    n.add_argument("--comm-trace", metavar="CSV", help="per-step message matrix CSV")
    n.add_argument("--transport", default="in_process", choices=TRANSPORTS)

    sub.add_parser("selftest", help="run the quick cross-module property checks")
    return p


def _cmd_bench(a) -> int:
    from .bench import BenchConfig, bench_forward, rows_to_csv

    try:
        cfg = BenchConfig(payload_bytes=a.payload_bytes, items=tuple(a.items), rounds=a.rounds,
                          num_ranks=a.ranks, transport=a.transport, pattern=a.pattern, seed=a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = bench_forward(cfg)
    _emit(rows_to_csv(rows), a.out)
    return 0


def _load_seeds(spec: str, fld) -> np.ndarray:
    from .streamlines import random_seeds

    if spec.startswith("random:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return random_seeds(fld, n, seed)
    if not os.path.exists(spec):
        raise FileNotFoundError(f"seed file {spec!r} not found")
    return np.loadtxt(spec, ndmin=2, dtype=np.float64)[:, :3]


def _cmd_streamlines(a) -> int:
    from .streamlines import (StreamlineConfig, format_streamlines, make_field, run_streamlines,
                              write_streamlines)

    fld = make_field(a.field)
    seeds = _load_seeds(a.seeds, fld)
    cfg = StreamlineConfig(field=fld, seeds=seeds, h=a.h, max_steps=a.max_steps)
    run = run_streamlines(cfg, a.ranks, a.transport)
    if a.out:
        write_streamlines(a.out, run.streamlines)
    else:
        sys.stdout.write(format_streamlines(run.streamlines))
    npts = sum(len(v) for v in run.streamlines.values())
    print(f"{len(run.streamlines)} streamlines, {npts} points, {run.rounds} rounds", file=sys.stderr)
    return 0


def _cmd_nbody(a) -> int:
    from .nbody import NBodyConfig, run_nbody

    cfg = NBodyConfig(n=a.n, steps=a.steps, theta=a.theta, dt=a.dt, softening=a.softening,
                      quadrupole=a.quadrupole, seed=a.seed, distribution=a.distribution,
                      snapshot_every=a.snapshot_every,
                      snapshot_dir=a.snapshot_dir if a.snapshot_every else None,
                      comm_trace=a.comm_trace)
    result, _ = run_nbody(cfg, a.ranks, a.transport)
    d0, d1 = result.diagnostics[0], result.diagnostics[-1]
    drift = np.linalg.norm(d1.momentum - d0.momentum)
    print(f"steps={a.steps} ranks={a.ranks} particles={d1.count} mass={d1.mass!r} "
          f"momentum_drift={drift:.3e}")
    return 0


def _cmd_selftest(a) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


COMMANDS = {"bench": _cmd_bench, "streamlines": _cmd_streamlines, "nbody": _cmd_nbody,
            "selftest": _cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("workfwd: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"workfwd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure: message, exit 1
        print(f"workfwd {args.command}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
