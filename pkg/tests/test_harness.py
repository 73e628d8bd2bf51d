import functools

import numpy as np
import pytest

from workfwd.comm import CommConfig, create_communicator
from workfwd.forward import WorkItemSchema, create_context
from workfwd.harness import LaunchError, RoundLimitError, launch, run_rounds
from workfwd.workloads import RING_ITEM, random_exchange_program, ring_walk_program


def return_rank(rank, comm):
    return rank


def one_round(rank, comm):
    ctx = create_context(comm, WorkItemSchema.raw(12, "one"), 64)
    ctx.view().emit_many(np.zeros(rank + 2, ctx.schema.dtype), np.arange(rank + 2) % comm.size)
    return ctx.forward()


def fail_on_two(rank, comm):
    comm.barrier()
    if rank == 2:
        raise RuntimeError("boom")
    comm.barrier()


def never_emits(rank, comm):
    ctx = create_context(comm, WorkItemSchema(RING_ITEM), 4)
    return run_rounds(ctx, lambda v: None)


def emits_forever(rank, comm):
    ctx = create_context(comm, WorkItemSchema(RING_ITEM), 4)
    return run_rounds(ctx, lambda v: v.emit_outgoing(np.zeros((), RING_ITEM), rank), max_rounds=25)


def late_work(rank, comm):
    """Rank 0 starts with an item that takes 3 hops to reach the last rank;
    every other rank starts empty and must keep looping."""
    ctx = create_context(comm, WorkItemSchema(RING_ITEM), 4)
    if rank == 0:
        ctx.set_incoming(np.array([(1, 3, 0)], RING_ITEM))
    seen = []

    def step(v):
        for item in v.incoming():
            seen.append(int(item["hops"]))
            if item["hops"] > 0:
                nxt = item.copy()
                nxt["hops"] -= 1
                v.emit_outgoing(nxt, (rank + 1) % comm.size)

    return run_rounds(ctx, step), seen


def test_single_rank_launch():
    report = launch(1, "in_process", return_rank)
    assert report.values == [0]


def test_report_totals():
    report = launch(4, "in_process", one_round)
    assert report.total_forwarded == sum(r + 2 for r in range(4))
    assert report.values == [14] * 4
    assert report.rounds == 1


def test_failure_names_rank():
    with pytest.raises(LaunchError) as info:
        launch(4, "in_process", fail_on_two, timeout_ms=2000)
    assert info.value.rank == 2
    assert "rank 2" in str(info.value) and "boom" in str(info.value)


def test_socket_failure_names_rank():
    with pytest.raises(LaunchError) as info:
        launch(3, "socket", fail_on_two, timeout_ms=5000)
    assert info.value.rank == 2


def test_unknown_transport():
    with pytest.raises(ValueError):
        launch(1, "smoke_signals", return_rank)
    with pytest.raises(ValueError):
        launch(0, "in_process", return_rank)


def test_never_emitting_step_is_one_round():
    assert launch(3, "in_process", never_emits).values == [1, 1, 1]


def test_max_rounds_guard():
    with pytest.raises(LaunchError) as info:
        launch(2, "in_process", emits_forever)
    assert "RoundLimitError" in str(info.value)
    with pytest.raises(RoundLimitError):
        emits_forever(0, create_communicator(CommConfig()))


def test_idle_ranks_keep_looping():
    out = launch(4, "in_process", late_work).values
    assert {r for r, _ in out} == {4}
    assert out[3][1] == [0]


@pytest.mark.parametrize("R", [1, 2, 3, 5])
def test_ring_walk_rounds(R):
    report = launch(R, "in_process", functools.partial(ring_walk_program, items_per_rank=2))
    rounds, returned, retired = zip(*report.values)
    assert set(rounds) == {R}
    assert len({tuple(x) for x in returned}) == 1
    assert sum(len(r) for r in retired) == 2 * R


def test_random_exchange_socket_matches_in_process():
    prog = functools.partial(random_exchange_program, seed=5, max_items=200, rounds=2)
    a = launch(3, "in_process", prog)
    b = launch(3, "socket", prog)
    assert a.values == b.values
    assert a.total_forwarded == b.total_forwarded
