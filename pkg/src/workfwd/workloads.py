"""Reusable rank programs (module level so socket ranks can unpickle them)."""
from __future__ import annotations

import numpy as np

from .comm import Communicator
from .forward import WorkItemSchema, create_context
from .harness import run_rounds

RING_ITEM = np.dtype([("id", "<u8"), ("hops", "<u4"), ("origin", "<u4")])


def id_payload_dtype(payload_bytes: int) -> np.dtype:
    """Record of ``payload_bytes`` bytes whose first 8 bytes hold an id."""
    if payload_bytes < 8:
        raise ValueError("payload must have room for an 8-byte id")
    if payload_bytes == 8:
        return np.dtype([("id", "<u8")])
    return np.dtype([("id", "<u8"), ("body", f"V{payload_bytes - 8}")])


def make_id(src, seq, tag=0):
    """(tag, source rank, sequence) packed as tag<<48 | src<<32 | seq."""
    return (np.uint64(tag) << np.uint64(48)) | (np.uint64(src) << np.uint64(32)) \
        | np.asarray(seq, dtype=np.uint64)


def ring_walk_program(rank: int, comm: Communicator, items_per_rank: int = 3, hops=None,
                      max_rounds: int = 10_000):
    """Items walk the ring rank -> rank+1; each round consumes one hop and
    an item retires when its hops run out.

    Returns (rounds, per-round forward results, retired ids).
    """
    R = comm.size
    hops = R if hops is None else hops
    ctx = create_context(comm, WorkItemSchema(RING_ITEM, "ring"), max(items_per_rank * R, 1))
    seeds = np.zeros(items_per_rank, dtype=RING_ITEM)
    seeds["id"] = make_id(rank, np.arange(items_per_rank))
    seeds["hops"] = hops
    seeds["origin"] = rank
    ctx.set_incoming(seeds)
    retired: list[int] = []

    def step(view):
        inc = view.incoming()
        left = inc["hops"] - 1
        done = left == 0
        retired.extend(int(i) for i in inc["id"][done])
        out = inc[~done].copy()
        out["hops"] = left[~done]
        view.emit_many(out, np.full(len(out), (rank + 1) % R))

    rounds = run_rounds(ctx, step, max_rounds=max_rounds)
    returned = [st.global_remaining for st in ctx.history]
    return rounds, returned, sorted(retired)


def random_exchange_batch(seed: int, rank: int, rnd: int, num_ranks: int, max_items: int,
                          payload_bytes: int):
    """The (items, dests) that ``random_exchange_program`` emits on ``rank``
    in round ``rnd``; deterministic so tests can replay it."""
    dt = id_payload_dtype(payload_bytes)
    rng = np.random.default_rng([seed, rank, rnd])
    n = int(rng.integers(0, max_items + 1))
    items = np.zeros(n, dtype=dt)
    items["id"] = make_id(rank, np.arange(n), tag=rnd)
    if payload_bytes > 8:
        body = rng.integers(0, 256, size=(n, payload_bytes - 8), dtype=np.uint8)
        items.view(np.uint8).reshape(n, payload_bytes)[:, 8:] = body
    return items, rng.integers(0, num_ranks, size=n)


def random_exchange_program(rank: int, comm: Communicator, seed: int = 0, max_items: int = 1000,
                            payload_bytes: int = 44, rounds: int = 3):
    """Several rounds of random-destination traffic with id-stamped payloads.

    Returns one (round, delivered ids, delivered bytes) tuple per round,
    sorted by id.
    """
    R = comm.size
    dt = id_payload_dtype(payload_bytes)
    ctx = create_context(comm, WorkItemSchema(dt, "random"), max_items * R)
    view = ctx.view()
    out = []
    for rnd in range(rounds):
        items, dests = random_exchange_batch(seed, rank, rnd, R, max_items, payload_bytes)
        view.emit_many(items, dests)
        ctx.forward()
        got = np.sort(view.incoming().copy(), order="id")
        out.append((rnd, got["id"].tolist(), got.tobytes()))
    return out
