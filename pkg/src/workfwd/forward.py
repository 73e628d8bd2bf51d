"""Destination-sorted work-item forwarding.

A :class:`ForwardingContext` owns two fixed-capacity queues of work items.
Compute code reads the input queue and appends ``(item, dest)`` pairs to the
output queue through an :class:`EmitView`. :meth:`ForwardingContext.forward`
is the collective step that moves every emitted item to its destination
rank:

1. pack ``(dest << 32) | index`` keys and radix-sort them,
2. gather items into destination order,
3. tally per-destination segments,
4. exchange counts, then item bytes, with the other ranks,
5. swap queues and sum-reduce the received counts across ranks.

A zero result from step 5 means no rank holds any work: distributed
termination.
"""
from __future__ import annotations

import csv
import logging
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .comm import Communicator

logger = logging.getLogger(__name__)

MAX_ITEMS_PER_ROUND = 2**32
_OVERFLOW_SHIFT = 56
_REMAINING_MASK = (1 << _OVERFLOW_SHIFT) - 1


class QueueOverflowError(RuntimeError):
    """More items were routed to a rank than its queue capacity."""


@dataclass(frozen=True)
class WorkItemSchema:
    """Fixed-size, byte-copyable record layout for one context."""

    dtype: np.dtype
    name: str = ""

    def __post_init__(self):
        dt = np.dtype(self.dtype)
        object.__setattr__(self, "dtype", dt)
        if dt.itemsize <= 0:
            raise ValueError("work items must be at least one byte")
        if dt.hasobject:
            raise ValueError("work items must be plain bytes, not Python objects")

    @classmethod
    def raw(cls, item_size_bytes: int, name: str = "") -> "WorkItemSchema":
        if item_size_bytes <= 0:
            raise ValueError("item_size_bytes must be positive")
        return cls(np.dtype((np.void, item_size_bytes)), name)

    @property
    def item_size_bytes(self) -> int:
        return self.dtype.itemsize


class AtomicCounter:
    def __init__(self, value: int = 0):
        self._value = value
        self._lock = threading.Lock()

    def fetch_add(self, n: int = 1) -> int:
        with self._lock:
            old = self._value
            self._value += n
            return old

    @property
    def value(self) -> int:
        return self._value

    def reset(self):
        with self._lock:
            self._value = 0


@dataclass
class ExchangePlan:
    send_counts: np.ndarray
    send_offsets: np.ndarray
    recv_counts: np.ndarray
    recv_offsets: np.ndarray

    @property
    def total_send(self) -> int:
        return int(self.send_counts.sum())

    @property
    def total_recv(self) -> int:
        return int(self.recv_counts.sum())

    @classmethod
    def from_counts(cls, send_counts, recv_counts) -> "ExchangePlan":
        sc = np.asarray(send_counts, dtype=np.int64)
        rc = np.asarray(recv_counts, dtype=np.int64)
        return cls(sc, exclusive_prefix_sum(sc), rc, exclusive_prefix_sum(rc))

    def scaled(self, item_size: int) -> tuple[np.ndarray, ...]:
        """Byte counts/offsets for the bulk exchange."""
        return (self.send_counts * item_size, self.send_offsets * item_size,
                self.recv_counts * item_size, self.recv_offsets * item_size)


@dataclass
class RoundStats:
    context: str
    rank: int
    round: int
    sent: list[int]
    received: int
    dropped: int
    invalid: int
    global_remaining: int
    timings_us: dict[str, float] = field(default_factory=dict)


def exclusive_prefix_sum(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros_like(counts)
    np.cumsum(counts[:-1], out=out[1:])
    return out


def pack_sort_keys(dests, n: int | None = None) -> np.ndarray:
    """``key[i] = dests[i] << 32 | i`` as uint64."""
    dests = np.asarray(dests)
    if n is None:
        n = len(dests)
    if n > len(dests):
        raise ValueError(f"n={n} exceeds {len(dests)} destinations")
    if n >= MAX_ITEMS_PER_ROUND:
        raise ValueError("at most 2**32 - 1 items per rank per round")
    d = dests[:n]
    if n and (d.min() < 0 or d.max() >= 2**32):
        raise ValueError("destinations must fit in 32 unsigned bits")
    return (d.astype(np.uint64) << np.uint64(32)) | np.arange(n, dtype=np.uint64)


def unpack_sort_keys(keys) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.uint64)
    return (keys >> np.uint64(32)).astype(np.int64), (keys & np.uint64(0xFFFFFFFF)).astype(np.int64)


def radix_sort_keys(keys) -> np.ndarray:
    """Least-significant-digit radix sort of uint64 keys, 16 bits per pass.

    Each pass is a stable counting sort on one digit (numpy's stable sort on
    uint16 is a radix sort). Passes over a digit that is identical for every
    key are skipped since they cannot reorder anything.
    """
    out = np.asarray(keys, dtype=np.uint64)
    if len(out) < 2:
        return out.copy()
    mask = np.uint64(0xFFFF)
    for shift in (0, 16, 32, 48):
        digit = ((out >> np.uint64(shift)) & mask).astype(np.uint16)
        if digit.min() == digit.max():
            continue
        out = out[np.argsort(digit, kind="stable")]
    if out is keys:
        out = out.copy()
    return out


def sort_and_gather(items, keys) -> tuple[np.ndarray, np.ndarray]:
    """Reorder ``items`` by the packed keys; returns (items, dests)."""
    sorted_keys = radix_sort_keys(keys)
    dests, idx = unpack_sort_keys(sorted_keys)
    return np.asarray(items)[idx], dests


def compute_segments(sorted_dests, num_ranks: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-rank (counts, offsets) of a destination-sorted array.

    Segment begin/end start at the -1 sentinel and are set where the
    destination changes; ranks nobody sends to are gap-filled with an empty
    segment at the end of the preceding one.
    """
    d = np.asarray(sorted_dests, dtype=np.int64)
    n = len(d)
    begin = np.full(num_ranks, -1, dtype=np.int64)
    end = np.full(num_ranks, -1, dtype=np.int64)
    if n:
        if d[0] < 0 or d[-1] >= num_ranks:
            raise ValueError(f"destination outside [0, {num_ranks})")
        step = d[1:] != d[:-1]
        if np.any(d[1:] < d[:-1]):
            raise ValueError("destinations are not sorted")
        starts = np.flatnonzero(np.concatenate(([True], step)))
        stops = np.flatnonzero(np.concatenate((step, [True]))) + 1
        begin[d[starts]] = starts
        end[d[stops - 1]] = stops
    prev_end = 0
    for r in range(num_ranks):
        if begin[r] < 0:
            begin[r] = end[r] = prev_end
        else:
            prev_end = end[r]
    return end - begin, begin


def _trace_path(rank: int) -> str:
    return os.path.join(os.environ.get("FORWARD_TRACE_DIR", "."), f"forward_trace.rank{rank}.csv")


class ForwardingContext:
    """Per-rank input/output queues for one work-item type.

    Several contexts may share one communicator; each ``forward`` call is a
    collective, so all ranks must forward their contexts in the same order.
    """

    def __init__(self, comm: Communicator, schema: WorkItemSchema):
        self.comm = comm
        self.schema = schema
        self.capacity = 0
        self.input_count = 0
        self._input = np.empty(0, dtype=schema.dtype)
        self._output = np.empty(0, dtype=schema.dtype)
        self._dests = np.empty(0, dtype=np.int64)
        self.emitted = AtomicCounter()
        self.dropped = AtomicCounter()
        self.invalid = AtomicCounter()
        self.rounds = 0
        self.history: list[RoundStats] = []
        self._trace = os.environ.get("FORWARD_TRACE") == "1"

    @property
    def name(self) -> str:
        return self.schema.name or str(self.schema.dtype)

    @property
    def num_ranks(self) -> int:
        return self.comm.size

    def resize_queues(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        keep = min(self.input_count, capacity)
        new_input = np.empty(capacity, dtype=self.schema.dtype)
        new_input[:keep] = self._input[:keep]
        self._input = new_input
        self._output = np.empty(capacity, dtype=self.schema.dtype)
        self._dests = np.empty(capacity, dtype=np.int64)
        self.input_count = keep
        self.capacity = capacity
        self._reset_counters()

    def _reset_counters(self):
        self.emitted.reset()
        self.dropped.reset()
        self.invalid.reset()

    def view(self) -> "EmitView":
        return EmitView(self)

    def set_incoming(self, items) -> None:
        """Seed the input queue directly (e.g. initial work on this rank)."""
        items = np.asarray(items, dtype=self.schema.dtype)
        if len(items) > self.capacity:
            raise QueueOverflowError(
                f"{len(items)} seed items exceed queue capacity {self.capacity}")
        self._input[:len(items)] = items
        self.input_count = len(items)

    @property
    def num_emitted(self) -> int:
        """Items currently stored in the output queue."""
        return min(self.emitted.value, self.capacity)

    def _emit(self, item, dest) -> bool:
        if not isinstance(dest, (int, np.integer)) or not 0 <= dest < self.comm.size:
            self.invalid.fetch_add(1)
            return False
        if isinstance(item, (bytes, bytearray, memoryview)) and len(item) != self.schema.item_size_bytes:
            raise ValueError(
                f"item has {len(item)} bytes, schema needs {self.schema.item_size_bytes}")
        slot = self.emitted.fetch_add(1)
        if slot >= self.capacity:
            self.dropped.fetch_add(1)
            return False
        self._output[slot] = item
        self._dests[slot] = dest
        return True

    def _emit_many(self, items, dests) -> int:
        items = np.asarray(items, dtype=self.schema.dtype)
        dests = np.asarray(dests, dtype=np.int64)
        if items.shape != dests.shape or items.ndim != 1:
            raise ValueError("items and dests must be 1-d arrays of equal length")
        valid = (dests >= 0) & (dests < self.comm.size)
        n_invalid = len(dests) - int(np.count_nonzero(valid))
        if n_invalid:
            self.invalid.fetch_add(n_invalid)
            items, dests = items[valid], dests[valid]
        k = len(items)
        if k == 0:
            return 0
        start = self.emitted.fetch_add(k)
        accepted = max(0, min(k, self.capacity - start))
        if accepted:
            self._output[start:start + accepted] = items[:accepted]
            self._dests[start:start + accepted] = dests[:accepted]
        if accepted < k:
            self.dropped.fetch_add(k - accepted)
        return accepted

    def forward(self) -> int:
        """Collective exchange of all emitted items.

        Returns the number of items received summed over every rank; zero
        means no rank has input left.
        """
        comm = self.comm
        R = comm.size
        itemsize = self.schema.item_size_bytes
        n = self.num_emitted
        dropped, invalid = self.dropped.value, self.invalid.value
        t0 = time.perf_counter()

        keys = pack_sort_keys(self._dests, n)
        dests, idx = unpack_sort_keys(radix_sort_keys(keys))
        # the input queue has been consumed; reuse it as the sorted send buffer
        np.take(self._output[:n], idx, out=self._input[:n])
        send_counts, _ = compute_segments(dests, R)
        t1 = time.perf_counter()

        recv_counts = comm.alltoall_counts(send_counts).astype(np.int64)
        plan = ExchangePlan.from_counts(send_counts, recv_counts)
        total_recv = plan.total_recv
        overflow = int(total_recv > self.capacity)
        # termination count and overflow flag travel in one reduction, before
        # any item bytes move, so every rank agrees on failure
        reduced = comm.allreduce_sum(min(total_recv, _REMAINING_MASK) | (overflow << _OVERFLOW_SHIFT))
        global_remaining = reduced & _REMAINING_MASK
        overflowing_ranks = reduced >> _OVERFLOW_SHIFT
        t2 = time.perf_counter()
        if overflowing_ranks:
            self.input_count = 0
            self._reset_counters()
            if overflow:
                raise QueueOverflowError(
                    f"rank {comm.rank}: {total_recv} incoming {self.name} items exceed "
                    f"capacity {self.capacity}")
            raise QueueOverflowError(
                f"rank {comm.rank}: {overflowing_ranks} peer rank(s) overflowed their "
                f"{self.name} queue")

        sc, so, rc, ro = plan.scaled(itemsize)
        comm.alltoallv_bytes(self._input[:n].view(np.uint8), sc, so,
                             self._output.view(np.uint8), rc, ro)
        t3 = time.perf_counter()

        self._input, self._output = self._output, self._input
        self.input_count = total_recv
        self._reset_counters()

        stats = RoundStats(
            context=self.name, rank=comm.rank, round=self.rounds,
            sent=[int(c) for c in send_counts], received=total_recv,
            dropped=dropped, invalid=invalid, global_remaining=global_remaining,
            timings_us={"sort": (t1 - t0) * 1e6, "count_exchange": (t2 - t1) * 1e6,
                        "bulk_exchange": (t3 - t2) * 1e6})
        self.rounds += 1
        self.history.append(stats)
        comm.forward_log.append(stats)
        if self._trace:
            self._write_trace(stats)
        return global_remaining

    def _write_trace(self, stats: RoundStats):
        path = _trace_path(stats.rank)
        new = not os.path.exists(path)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["context", "round", "rank",
                            *[f"sent_to_{r}" for r in range(len(stats.sent))],
                            "received", "dropped"])
            w.writerow([stats.context, stats.round, stats.rank, *stats.sent,
                        stats.received, stats.dropped])


class EmitView:
    """Cheap handle that compute code uses to read input and emit output.

    All copies of a view share the owning context's counters.
    """

    __slots__ = ("_ctx",)

    def __init__(self, ctx: ForwardingContext):
        self._ctx = ctx

    @property
    def rank(self) -> int:
        return self._ctx.comm.rank

    @property
    def num_ranks(self) -> int:
        return self._ctx.comm.size

    @property
    def capacity(self) -> int:
        return self._ctx.capacity

    def num_incoming(self) -> int:
        return self._ctx.input_count

    def get_incoming(self, idx: int):
        ctx = self._ctx
        if not 0 <= idx < ctx.input_count:
            raise IndexError(f"incoming index {idx} outside [0, {ctx.input_count})")
        return ctx._input[idx].copy()

    def incoming(self) -> np.ndarray:
        """Read-only array over the whole valid input queue."""
        arr = self._ctx._input[:self._ctx.input_count]
        arr = arr.view()
        arr.flags.writeable = False
        return arr

    def emit_outgoing(self, item, dest: int) -> bool:
        """Append one item; False if it was dropped (full queue or bad rank)."""
        return self._ctx._emit(item, dest)

    def emit_many(self, items, dests) -> int:
        """Append a batch under one counter update; returns how many fit."""
        return self._ctx._emit_many(items, dests)


def create_context(comm: Communicator, schema: WorkItemSchema, capacity: int = 0) -> ForwardingContext:
    ctx = ForwardingContext(comm, schema)
    if capacity:
        ctx.resize_queues(capacity)
    return ctx


def gather_items(comm: Communicator, items, dtype, root: int = 0, name: str = "gather"):
    """Collect every rank's ``items`` on ``root`` (ordered by source rank).

    Returns the concatenated array on ``root`` and None elsewhere.
    """
    items = np.asarray(items, dtype=dtype)
    total = comm.allreduce_sum(len(items))
    ctx = create_context(comm, WorkItemSchema(dtype, name))
    ctx.resize_queues(total if comm.rank == root else len(items))
    ctx.view().emit_many(items, np.full(len(items), root))
    ctx.forward()
    if comm.rank != root:
        return None
    return ctx.view().incoming().copy()
