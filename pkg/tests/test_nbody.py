import functools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from workfwd.forward import WorkItemSchema, create_context
from workfwd.harness import launch
from workfwd.nbody.exchange import PARTICLE, imported_tree, nearest_distance, virtual_particles
from workfwd.nbody.morton import MortonPartition, interleave, morton_key, quantize
from workfwd.nbody.sim import (NBodyConfig, force_program, forest_forces, global_bounds,
                               initial_particles, leapfrog_step, migrate, run_nbody, total_energy)
from workfwd.nbody.tree import (EssentialTreeError, build_tree, direct_accelerations, mac_accept,
                                quadrupole_of, tree_accelerations)
from conftest import spmd

LO, HI = np.zeros(3), np.ones(3)


def make_particles(pos, mass=None, vel=None):
    p = np.zeros(len(pos), PARTICLE)
    p["pos"] = pos
    p["mass"] = 1.0 if mass is None else mass
    if vel is not None:
        p["vel"] = vel
    p["id"] = np.arange(len(pos))
    return p


# --- morton ----------------------------------------------------------------

def test_morton_endpoints():
    assert morton_key(LO, LO, HI) == 0
    assert morton_key(HI, LO, HI) == 2**30 - 1


def test_morton_toy_interleave():
    assert int(interleave(np.array([1, 0, 0]))) == 0b001
    assert int(interleave(np.array([0, 1, 0]))) == 0b010
    assert int(interleave(np.array([0, 0, 1]))) == 0b100
    assert morton_key([0.9, 0.1, 0.1], LO, HI, bits=1) == 0b001


@given(st.integers(0, 1023), st.integers(0, 1023), st.integers(0, 1023))
def test_interleave_bitwise_oracle(x, y, z):
    want = 0
    for b in range(10):
        want |= ((x >> b) & 1) << (3 * b) | ((y >> b) & 1) << (3 * b + 1) | ((z >> b) & 1) << (3 * b + 2)
    assert int(interleave(np.array([x, y, z]))) == want


def test_out_of_bounds_positions_clamp():
    assert quantize([[-0.5, 2.0, 0.5]], LO, HI).tolist() == [[0, 1023, 512]]


@given(st.integers(1, 8), st.integers(0, 2**32))
def test_owner_matches_linear_scan(R, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.1, 1.1, size=(50, 3))
    part = MortonPartition.balanced(rng.uniform(0, 1, size=(40, 3)), R, LO, HI)
    keys = np.atleast_1d(part.key(pts))
    for k, o in zip(keys, part.owner_of_particle(pts)):
        scan = [r for r in range(R) if part.splits[r] <= k < part.splits[r + 1]]
        assert [o] == scan


def test_partition_endpoints():
    part = MortonPartition.balanced(np.random.default_rng(0).uniform(size=(100, 3)), 4, LO, HI)
    assert part.owner_of_particle(LO) == 0
    assert part.owner_of_particle(HI) == 3
    with pytest.raises(ValueError):
        MortonPartition(LO, HI, [0, 5])


# --- tree ------------------------------------------------------------------

def test_single_particle_tree():
    t = build_tree([[0.3, 0.2, 0.1]], [2.0])
    assert t.size == 1 and t.smax[0] == 0 and t.mass[0] == 2.0
    assert np.array_equal(t.com[0], [0.3, 0.2, 0.1])


def test_symmetric_pair():
    t = build_tree([[-1.0, 0, 0], [1.0, 0, 0]], [1.5, 1.5])
    assert t.mass[0] == 3.0 and np.allclose(t.com[0], 0)


def test_aggregation_vs_direct_sums():
    rng = np.random.default_rng(5)
    pos, m = rng.normal(size=(100, 3)), rng.uniform(0.1, 2, 100)
    t = build_tree(pos, m)
    assert abs(t.mass[0] - m.sum()) <= 1e-12 * m.sum()
    com = (m[:, None] * pos).sum(0) / m.sum()
    assert np.allclose(t.com[0], com, rtol=0, atol=1e-12)
    assert np.allclose(t.quad[0], quadrupole_of(pos, m, com), atol=1e-10)
    # every interior node aggregates its children
    for node in range(t.size):
        ch = t.children_of(node)
        if len(ch):
            assert np.isclose(t.mass[node], t.mass[ch].sum(), rtol=1e-13)
            assert t.smax[node] > 0
    assert sorted(t.particle[t.particle >= 0].tolist()) == list(range(100))


def test_empty_tree():
    t = build_tree(np.zeros((0, 3)), np.zeros(0))
    assert t.size == 0
    assert np.all(tree_accelerations(t, [[0, 0, 0]], 0.5, 0.1) == 0)


def test_mac_examples():
    assert mac_accept(0.0, 0.0, 0.5)
    assert mac_accept(1.0, 10.0, 0.5)
    assert not mac_accept(1.0, 1.0, 0.5)
    assert not mac_accept(1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        mac_accept(1.0, 1.0, 0.0)


def test_newton_pair():
    pos, m = np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.ones(2)
    for acc in (direct_accelerations(pos, m, 0.0),
                tree_accelerations(build_tree(pos, m), pos, 0.5, 0.0, exclude=np.arange(2))):
        assert np.allclose(acc, [[1, 0, 0], [-1, 0, 0]], atol=1e-15)


def test_square_has_zero_net_force():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
    t = build_tree(pos, np.ones(4))
    acc = tree_accelerations(t, pos, 0.5, 0.01, exclude=np.arange(4))
    assert np.allclose(acc.sum(0), 0, atol=1e-10)


def test_theta_to_zero_is_direct_sum():
    p = initial_particles(200, seed=2)
    t = build_tree(p["pos"], p["mass"])
    acc = tree_accelerations(t, p["pos"], 1e-6, 0.02, exclude=np.arange(200))
    assert np.allclose(acc, direct_accelerations(p["pos"], p["mass"], 0.02), rtol=1e-12, atol=1e-14)


def test_quadrupole_reduces_error():
    p = initial_particles(512, seed=0)
    t = build_tree(p["pos"], p["mass"])
    ref = direct_accelerations(p["pos"], p["mass"], 0.02)
    errs = []
    for quad in (False, True):
        acc = tree_accelerations(t, p["pos"], 0.5, 0.02, quadrupole=quad, exclude=np.arange(512))
        errs.append(np.median(np.linalg.norm(acc - ref, axis=1) / np.linalg.norm(ref, axis=1)))
    assert errs[0] < 0.02 and errs[1] < errs[0]


# --- leapfrog --------------------------------------------------------------

def test_zero_force_is_pure_drift():
    p = make_particles([[0.0, 0, 0]], vel=[[1.0, 2.0, 3.0]])
    p = leapfrog_step(p, 0.5, lambda q: q)
    assert np.allclose(p["pos"], [[0.5, 1.0, 1.5]])


def test_zero_dt_is_identity():
    p = initial_particles(10)
    p["force"] = 1.0
    before = p.copy()
    p = leapfrog_step(p, 0.0, lambda q: q)
    assert p.tobytes() == before.tobytes()


def test_two_body_energy():
    # equal masses 1/2 at separation 1: angular velocity 1, period 2 pi
    v = 0.5
    p = make_particles([[-0.5, 0, 0], [0.5, 0, 0]], mass=[0.5, 0.5], vel=[[0, -v, 0], [0, v, 0]])

    def forces(q):
        q["force"] = q["mass"][:, None] * direct_accelerations(q["pos"], q["mass"], 0.0)
        return q

    p = forces(p)
    e0 = total_energy(p, 0.0)
    dt = 1e-3 * 2 * math.pi
    worst = 0.0
    for _ in range(1000):
        p = leapfrog_step(p, dt, forces)
        worst = max(worst, abs(total_energy(p, 0.0) - e0) / abs(e0))
    assert worst < 1e-3
    assert np.allclose(p["pos"], [[-0.5, 0, 0], [0.5, 0, 0]], atol=1e-3)


# --- migration -------------------------------------------------------------

def migrate_program(rank, comm, moves):
    part = MortonPartition(LO, HI, [0, 2**29, 2**30])
    pctx = create_context(comm, WorkItemSchema(PARTICLE), 8)
    start = [[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]] if rank == 0 else [[0.9, 0.9, 0.9]]
    p = make_particles(start)
    p["id"] += 10 * rank
    if rank == 0 and moves:
        p["pos"][0] = [0.8, 0.8, 0.8]
    out = migrate(pctx, p, part)
    return sorted(out["id"].tolist())


def test_migration_without_crossing():
    assert spmd(2, functools.partial(migrate_program, moves=False)) == [[0, 1], [10]]


def test_migration_one_crossing():
    assert spmd(2, functools.partial(migrate_program, moves=True)) == [[1], [0, 10]]


def test_out_of_bounds_particle_stays_owned():
    part = MortonPartition(LO, HI, [0, 2**29, 2**30])
    assert part.owner_of_particle([1.5, 1.5, 1.5]) == 1
    assert part.owner_of_particle([-3.0, -3.0, -3.0]) == 0


# --- essential tree exchange -----------------------------------------------

def exchange_setup(particles, R, theta=0.5):
    lo, hi = global_bounds(particles["pos"])
    part = MortonPartition.balanced(particles["pos"], R, lo, hi)
    report = launch(R, "in_process", functools.partial(
        force_program, particles=particles, partition=part, theta=theta, softening=0.02))
    return part, report


def test_single_rank_imports_nothing():
    _, report = exchange_setup(initial_particles(64), 1)
    local, imported, _ = report.values[0]
    assert imported == []


def test_far_apart_ranks_import_only_the_root():
    rng = np.random.default_rng(1)
    pos = np.concatenate([rng.uniform(0, 0.05, size=(40, 3)), rng.uniform(9.95, 10, size=(40, 3))])
    p = make_particles(pos, mass=np.full(80, 1 / 80))
    _, report = exchange_setup(p, 2)
    for local, imported, _ in report.values:
        assert len(local) == 40
        assert len(imported) == 1 and imported[0].size == 1


def test_imported_frontier_passes_mac_everywhere():
    p = initial_particles(256, seed=11)
    part, report = exchange_setup(p, 2)
    for local, imported, _ in report.values:
        assert imported
        for t in imported:
            frontier = np.flatnonzero(t.num_children(np.arange(t.size)) == 0)
            d = np.linalg.norm(t.com[frontier][:, None, :] - local["pos"][None, :, :], axis=-1)
            assert np.all(mac_accept(t.smax[frontier][:, None], d, 0.5))


def test_used_remote_nodes_satisfied_mac():
    p = initial_particles(256, seed=12)
    _, report = exchange_setup(p, 4)
    for local, imported, _ in report.values:
        for t in imported:
            used = []
            tree_accelerations(t, local["pos"], 0.5, 0.02, used=used)
            for tgt, node in used:
                far = t.smax[node] > 0
                d = np.linalg.norm(t.com[node[far]] - local["pos"][tgt[far]], axis=1)
                assert np.all(mac_accept(t.smax[node[far]], d, 0.5))


def test_unrefined_node_is_an_error():
    p = initial_particles(64)
    t = build_tree(p["pos"], p["mass"])
    root_only = imported_tree(virtual_particles(t, [0], 1), 1)
    with pytest.raises(EssentialTreeError):
        tree_accelerations(root_only, p["pos"][:1], 0.5, 0.02)


def test_nearest_distance():
    assert nearest_distance([[2.0, 0.5, 0.5]], LO, HI).tolist() == [1.0]
    assert nearest_distance([[0.5, 0.5, 0.5]], LO, HI).tolist() == [0.0]


@pytest.mark.parametrize("R", [2, 3])
def test_rank_equivalence_against_forest(R):
    p = initial_particles(200, seed=R)
    part, report = exchange_setup(p, R)
    owners = part.owner_of_particle(p["pos"])
    ref = forest_forces([p[owners == r] for r in range(R)], 0.5, 0.02)
    for r, (local, _, _) in enumerate(report.values):
        err = np.linalg.norm(local["force"] - ref[r], axis=1) / np.linalg.norm(ref[r], axis=1)
        assert err.max() <= 1e-10


# --- driver ----------------------------------------------------------------

def test_run_nbody_conserves_count_and_mass(tmp_path):
    cfg = NBodyConfig(n=120, steps=4, dt=5e-3, snapshot_every=2, snapshot_dir=str(tmp_path / "snap"),
                      comm_trace=str(tmp_path / "trace.csv"))
    result, report = run_nbody(cfg, 3)
    assert {d.count for d in result.diagnostics} == {120}
    assert len({d.mass for d in result.diagnostics}) == 1
    assert len(result.particles) == 120
    snaps = sorted(x.name for x in (tmp_path / "snap").iterdir())
    assert snaps == ["snapshot_000000.txt", "snapshot_000002.txt", "snapshot_000004.txt"]
    rows = np.loadtxt(tmp_path / "snap" / "snapshot_000002.txt", skiprows=1)
    assert rows.shape == (120, 4)
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,context,src,dst,count"
    assert any(",particle," in line for line in trace[1:])


def test_run_nbody_matches_across_rank_counts_at_direct_limit():
    # with theta tiny every tree reduces to the direct sum, so trajectories
    # agree across decompositions up to summation order
    cfg = NBodyConfig(n=60, steps=3, theta=1e-6, dt=1e-2)
    a, _ = run_nbody(cfg, 1)
    b, _ = run_nbody(cfg, 3)
    assert np.allclose(a.particles["pos"], b.particles["pos"], rtol=0, atol=1e-12)
