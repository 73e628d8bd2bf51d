"""Forwarding throughput sweep.

For every batch size the output queues are filled with id-stamped payloads
(untimed), then ``forward`` is timed between two barriers. The first round
of each point is a warm-up and is discarded; the row reports the median of
the rest. Every round is checked for exact conservation before its time
counts.
"""
from __future__ import annotations

import csv
import functools
import io
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .comm import Communicator
from .forward import WorkItemSchema, create_context
from .harness import launch
from .workloads import id_payload_dtype, make_id

logger = logging.getLogger(__name__)

CSV_HEADER = ["items", "payload_bytes", "transport", "ranks", "pattern",
              "sec_per_forward", "items_per_sec", "bytes_per_sec"]
PATTERNS = ("uniform_random", "ring", "all_to_one", "self")
MIN_ROUNDS = 5


class ConservationError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    payload_bytes: int = 44
    items: tuple[int, ...] = (1_000, 10_000, 100_000)
    rounds: int = MIN_ROUNDS
    num_ranks: int = 4
    transport: str = "in_process"
    pattern: str = "uniform_random"
    seed: int = 0

    def __post_init__(self):
        if self.payload_bytes < 8:
            raise ValueError("payload_bytes must be >= 8 to hold the check id")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")
        if self.rounds < MIN_ROUNDS:
            raise ValueError(f"need at least {MIN_ROUNDS} timed rounds per point")
        if not self.items or any(n < 0 for n in self.items):
            raise ValueError("items must be a non-empty list of non-negative counts")
        self.items = tuple(int(n) for n in self.items)


@dataclass
class BenchRow:
    items: int
    payload_bytes: int
    transport: str
    ranks: int
    pattern: str
    sec_per_forward: float
    items_per_sec: float
    bytes_per_sec: float

    def as_list(self) -> list:
        return [self.items, self.payload_bytes, self.transport, self.ranks, self.pattern,
                f"{self.sec_per_forward:.9g}", f"{self.items_per_sec:.9g}",
                f"{self.bytes_per_sec:.9g}"]


def pattern_dests(pattern: str, src: int, n: int, num_ranks: int, seed: int, point: int, rnd: int):
    if pattern == "uniform_random":
        rng = np.random.default_rng([seed, point, rnd, src])
        return rng.integers(0, num_ranks, size=n)
    if pattern == "ring":
        return np.full(n, (src + 1) % num_ranks)
    if pattern == "all_to_one":
        return np.zeros(n, dtype=np.int64)
    return np.full(n, src)


def _tag(point: int, rnd: int) -> int:
    return (point << 8) | (rnd & 0xFF)


def bench_program(rank: int, comm: Communicator, cfg: BenchConfig):
    R = comm.size
    dt = id_payload_dtype(cfg.payload_bytes)
    fan_in = R if cfg.pattern in ("uniform_random", "all_to_one") else 1
    ctx = create_context(comm, WorkItemSchema(dt, "bench"), max(cfg.items) * fan_in)
    view = ctx.view()
    rows = []
    for point, n in enumerate(cfg.items):
        times = []
        for rnd in range(cfg.rounds + 1):
            items = np.zeros(n, dtype=dt)
            items["id"] = make_id(rank, np.arange(n), tag=_tag(point, rnd))
            view.emit_many(items, pattern_dests(cfg.pattern, rank, n, R, cfg.seed, point, rnd))

            comm.barrier()
            t0 = time.perf_counter()
            ctx.forward()
            comm.barrier()
            elapsed = time.perf_counter() - t0

            problem = _check_delivery(view.incoming()["id"], rank, n, R, cfg, point, rnd)
            if comm.allreduce_sum(1 if problem else 0):
                raise ConservationError(
                    f"rank {rank}, {n} items, round {rnd}: {problem or 'a peer failed the check'}")
            if rnd > 0:
                times.append(elapsed)
        sec = statistics.median(times)
        ips = n * R / sec if sec > 0 else float("inf")
        rows.append(BenchRow(n, cfg.payload_bytes, cfg.transport, R, cfg.pattern, sec, ips,
                             ips * cfg.payload_bytes))
    return rows if rank == 0 else None


def _check_delivery(ids: np.ndarray, rank, n, R, cfg, point, rnd) -> str:
    expected = []
    for src in range(R):
        d = pattern_dests(cfg.pattern, src, n, R, cfg.seed, point, rnd)
        expected.append(make_id(src, np.flatnonzero(d == rank), tag=_tag(point, rnd)))
    expected = np.sort(np.concatenate(expected))
    got = np.sort(ids)
    if len(got) != len(expected):
        return f"received {len(got)} items, expected {len(expected)}"
    if not np.array_equal(got, expected):
        return "received id multiset differs from what was sent here"
    return ""


def bench_forward(cfg: BenchConfig) -> list[BenchRow]:
    report = launch(cfg.num_ranks, cfg.transport, functools.partial(bench_program, cfg=cfg))
    rows = report.values[0]
    if not trend_nondecreasing(rows):
        logger.warning("bytes/s is not non-decreasing with batch size: %s",
                       [round(r.bytes_per_sec) for r in rows])
    return rows


def trend_nondecreasing(rows: list[BenchRow]) -> bool:
    ordered = sorted(rows, key=lambda r: r.items)
    return all(b.bytes_per_sec >= a.bytes_per_sec for a, b in zip(ordered, ordered[1:]))


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
