"""Launch R ranks, run a program on each and aggregate the results.

``in_process`` ranks are threads sharing an :class:`InProcessWorld`;
``socket`` ranks are spawned processes that find each other through the
WF_RANK / WF_WORLD / WF_ENDPOINTS / WF_TRANSPORT environment variables.
Socket programs must therefore be picklable (module-level functions or
``functools.partial`` of them).
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import os
import queue as queue_mod
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable

from .comm import (DEFAULT_TIMEOUT_MS, CommAborted, CommConfig, CommError, Communicator,
                   InProcessWorld, communicator_from_env, create_communicator, free_endpoints)
from .forward import ForwardingContext, RoundStats

logger = logging.getLogger(__name__)

RankProgram = Callable[[int, Communicator], Any]

DEFAULT_MAX_ROUNDS = 1_000_000


class LaunchError(RuntimeError):
    def __init__(self, rank: int, message: str, details: str = ""):
        super().__init__(f"rank {rank} failed: {message}")
        self.rank = rank
        self.details = details


class RoundLimitError(RuntimeError):
    pass


@dataclass
class RankResult:
    rank: int
    value: Any
    forward_log: list[RoundStats]
    wall_us: float


@dataclass
class RunReport:
    results: list[RankResult]
    rounds: int
    total_forwarded: int
    total_dropped: int
    phase_us: dict[str, float] = field(default_factory=dict)

    @property
    def values(self) -> list:
        return [r.value for r in self.results]

    @classmethod
    def from_results(cls, results: list[RankResult]) -> "RunReport":
        results = sorted(results, key=lambda r: r.rank)
        rounds = {len(r.forward_log) for r in results}
        if len(rounds) > 1:
            raise RuntimeError(f"ranks disagree on forward count: {sorted(rounds)}")
        phase: dict[str, float] = {}
        for r in results:
            for st in r.forward_log:
                for k, v in st.timings_us.items():
                    phase[k] = phase.get(k, 0.0) + v
        phase["wall"] = max((r.wall_us for r in results), default=0.0)
        return cls(
            results=results,
            rounds=rounds.pop() if rounds else 0,
            total_forwarded=sum(st.received for r in results for st in r.forward_log),
            total_dropped=sum(st.dropped for r in results for st in r.forward_log),
            phase_us=phase,
        )


def _pick_failure(failures: dict[int, tuple[bool, str, str]]) -> LaunchError:
    # prefer the rank whose own program failed over ranks that only saw the fallout
    primary = sorted(r for r, (secondary, _, _) in failures.items() if not secondary)
    rank = primary[0] if primary else min(failures)
    _, msg, details = failures[rank]
    return LaunchError(rank, msg, details)


def _launch_threads(num_ranks, program, timeout_ms) -> RunReport:
    world = InProcessWorld(num_ranks)
    results: list[RankResult] = []
    failures: dict[int, tuple[bool, str, str]] = {}
    lock = threading.Lock()

    def run(rank):
        t0 = time.perf_counter()
        comm = None
        try:
            comm = create_communicator(
                CommConfig("in_process", num_ranks, rank, timeout_ms=timeout_ms), world=world)
            value = program(rank, comm)
            res = RankResult(rank, value, list(comm.forward_log), (time.perf_counter() - t0) * 1e6)
            with lock:
                results.append(res)
        except BaseException as exc:  # noqa: BLE001 - reported through LaunchError
            secondary = isinstance(exc, CommAborted)
            with lock:
                failures[rank] = (secondary, f"{type(exc).__name__}: {exc}", traceback.format_exc())
            world.abort(rank, f"{type(exc).__name__}: {exc}")
        finally:
            if comm is not None:
                comm.close()

    threads = [threading.Thread(target=run, args=(r,), name=f"wf-rank-{r}", daemon=True)
               for r in range(num_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise _pick_failure(failures)
    return RunReport.from_results(results)


def _socket_rank_main(rank, num_ranks, endpoints, timeout_ms, program, out_queue):
    os.environ.update(WF_RANK=str(rank), WF_WORLD=str(num_ranks),
                      WF_ENDPOINTS=",".join(endpoints), WF_TRANSPORT="socket")
    t0 = time.perf_counter()
    comm = None
    try:
        comm = communicator_from_env(timeout_ms)
        value = program(rank, comm)
        out_queue.put(("ok", rank, RankResult(rank, value, list(comm.forward_log),
                                              (time.perf_counter() - t0) * 1e6)))
    except BaseException as exc:  # noqa: BLE001
        # a peer dying shows up here as a reset or closed connection
        secondary = isinstance(exc, CommError)
        out_queue.put(("err", rank, (secondary, f"{type(exc).__name__}: {exc}",
                                     traceback.format_exc())))
    finally:
        if comm is not None:
            comm.close()


def _launch_processes(num_ranks, program, timeout_ms) -> RunReport:
    ctx = mp.get_context("spawn")
    endpoints = free_endpoints(num_ranks)
    out_queue = ctx.Queue()
    procs = [ctx.Process(target=_socket_rank_main, name=f"wf-rank-{r}",
                         args=(r, num_ranks, endpoints, timeout_ms, program, out_queue))
             for r in range(num_ranks)]
    for p in procs:
        p.start()
    results, failures = [], {}
    # generous: spawn start-up plus the program's own collectives
    deadline = time.monotonic() + max(60.0, 4 * timeout_ms / 1000.0)
    try:
        while len(results) + len(failures) < num_ranks:
            try:
                kind, rank, payload = out_queue.get(timeout=0.2)
            except queue_mod.Empty:
                dead = [p for p in procs if p.exitcode not in (None, 0)]
                if dead and out_queue.empty():
                    time.sleep(0.2)
                    if out_queue.empty():
                        for p in dead:
                            r = procs.index(p)
                            if r not in failures and all(x.rank != r for x in results):
                                failures[r] = (False, f"process exited with code {p.exitcode}", "")
                if time.monotonic() > deadline:
                    raise LaunchError(-1, "timed out waiting for rank processes")
                continue
            if kind == "ok":
                results.append(payload)
            else:
                failures[rank] = payload
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.kill()
                p.join()
    if failures:
        raise _pick_failure(failures)
    return RunReport.from_results(results)


def launch(num_ranks: int, transport: str, program: RankProgram,
           timeout_ms: int = DEFAULT_TIMEOUT_MS) -> RunReport:
    """Run ``program(rank, comm)`` on ``num_ranks`` ranks and aggregate."""
    if num_ranks < 1:
        raise ValueError("num_ranks must be >= 1")
    if transport == "in_process":
        return _launch_threads(num_ranks, program, timeout_ms)
    if transport == "socket":
        return _launch_processes(num_ranks, program, timeout_ms)
    raise ValueError(f"unknown transport {transport!r}")


def run_rounds(ctx: ForwardingContext, step: Callable, max_rounds: int = DEFAULT_MAX_ROUNDS) -> int:
    """Alternate ``step(view)`` and ``ctx.forward()`` until no rank has work.

    A rank whose own queue is empty keeps looping while the global count is
    nonzero, since peers may still route work to it.
    """
    view = ctx.view()
    rounds = 0
    while True:
        if rounds >= max_rounds:
            raise RoundLimitError(f"no termination after {max_rounds} rounds")
        step(view)
        remaining = ctx.forward()
        rounds += 1
        if remaining == 0:
            return rounds
