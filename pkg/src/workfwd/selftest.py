"""Quick headless property checks across all modules (``workfwd selftest``)."""
from __future__ import annotations

import functools
import sys
import time
import traceback

import numpy as np

from .forward import compute_segments, pack_sort_keys, sort_and_gather
from .harness import launch
from .workloads import random_exchange_batch, random_exchange_program, ring_walk_program


def check_sort_oracle(instances: int = 100, seed: int = 1) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        R = int(rng.integers(1, 17))
        n = int(rng.integers(0, 2000))
        dests = rng.integers(0, R, size=n)
        items = np.arange(n)
        got, sd = sort_and_gather(items, pack_sort_keys(dests))
        want = np.concatenate([items[dests == r] for r in range(R)]) if n else items
        assert np.array_equal(got, want), "sorted order differs from the stable counting sort"
        counts, offsets = compute_segments(sd, R)
        bc = np.bincount(dests, minlength=R)
        assert np.array_equal(counts, bc)
        assert np.array_equal(offsets, np.concatenate([[0], np.cumsum(bc)[:-1]]))


def check_conservation(trials: int = 6, seed: int = 2) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        R = int(rng.integers(1, 5))
        s, pb = int(rng.integers(1 << 30)), int(rng.integers(8, 65))
        report = launch(R, "in_process", functools.partial(
            random_exchange_program, seed=s, max_items=500, payload_bytes=pb, rounds=2))
        for rnd in range(2):
            batches = [random_exchange_batch(s, src, rnd, R, 500, pb) for src in range(R)]
            for dst, v in enumerate(report.values):
                want = np.sort(np.concatenate([it[d == dst] for it, d in batches]), order="id")
                assert v[rnd][2] == want.tobytes(), f"rank {dst} round {rnd}: delivery mismatch"


def check_ring_walk() -> None:
    for R in (1, 2, 4):
        report = launch(R, "in_process", functools.partial(ring_walk_program, items_per_rank=3))
        rounds = {v[0] for v in report.values}
        assert rounds == {R}, f"R={R}: rounds {rounds}"
        assert len({tuple(v[1]) for v in report.values}) == 1, "ranks saw different forward results"


def check_streamline_partitions() -> None:
    from .streamlines import StreamlineConfig, rotation_field, run_streamlines

    fld = rotation_field(16)
    seeds = np.array([[0.5, 0.0, 0.5], [0.0, -0.9, 0.5], [-0.3, 0.3, 0.5]])
    cfg = StreamlineConfig(field=fld, seeds=seeds, h=0.05, max_steps=60)
    one = run_streamlines(cfg, 1).streamlines
    two = run_streamlines(cfg, 3).streamlines
    assert one.keys() == two.keys()
    for k in one:
        assert one[k].shape == two[k].shape and np.max(np.abs(one[k] - two[k]), initial=0) <= 1e-6


def check_nbody_ranks() -> None:
    from .nbody.morton import MortonPartition
    from .nbody.sim import force_program, forest_forces, global_bounds, initial_particles

    p = initial_particles(128, seed=3)
    lo, hi = global_bounds(p["pos"])
    part = MortonPartition.balanced(p["pos"], 2, lo, hi)
    report = launch(2, "in_process", functools.partial(
        force_program, particles=p, partition=part, theta=0.5, softening=0.02))
    owners = part.owner_of_particle(p["pos"])
    ref = forest_forces([p[owners == r] for r in range(2)], 0.5, 0.02)
    for r, v in enumerate(report.values):
        scale = np.linalg.norm(ref[r], axis=1)
        assert np.all(np.linalg.norm(v[0]["force"] - ref[r], axis=1) <= 1e-10 * scale)


def check_migration() -> None:
    from .nbody.sim import NBodyConfig, run_nbody

    result, _ = run_nbody(NBodyConfig(n=96, steps=3, dt=1e-2), 3)
    counts = {d.count for d in result.diagnostics}
    masses = {d.mass for d in result.diagnostics}
    assert counts == {96} and len(masses) == 1


CHECKS = [
    ("sort pipeline vs counting sort", check_sort_oracle),
    ("forwarding conservation", check_conservation),
    ("ring-walk termination", check_ring_walk),
    ("streamline partition independence", check_streamline_partitions),
    ("n-body rank equivalence", check_nbody_ranks),
    ("migration conservation", check_migration),
]


def run_selftest(out=None) -> bool:
    out = out or sys.stdout
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception:
            ok = False
            status = "FAIL"
            traceback.print_exc(file=out)
        print(f"{status} {name} ({time.perf_counter() - t0:.2f}s)", file=out)
    return ok
