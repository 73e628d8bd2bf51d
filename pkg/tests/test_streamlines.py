import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from workfwd.forward import WorkItemSchema, create_context
from workfwd.streamlines import (OUTSIDE, STREAM_POINT, TRACE_PARTICLE, GridPartition, HaloError,
                                 StreamlineConfig, StreamlineParams, VectorField, abc_field,
                                 advect_round, constant_field, format_streamlines, halo_width,
                                 load_field, make_field, read_streamlines, rk4_step,
                                 rotation_field, run_streamlines, sample_field, save_field,
                                 write_streamlines)
from conftest import spmd


def random_field(dims, seed=0):
    rng = np.random.default_rng(seed)
    return VectorField(dims, (0.5, 1.0, 2.0), (-1.0, 0.0, 3.0), rng.normal(size=(*dims, 3)))


def trilinear_oracle(fld, p):
    """Closed-form weighted sum over the 8 corners of the containing cell."""
    g = (np.asarray(p) - fld.origin) / fld.spacing
    i0 = np.minimum(np.floor(g).astype(int), np.array(fld.dims) - 2)
    f = g - i0
    out = np.zeros(3)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                out += w * fld.values[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


# --- sampling --------------------------------------------------------------

def test_vertex_identity():
    fld = random_field((4, 5, 3))
    for ijk in [(0, 0, 0), (3, 4, 2), (1, 2, 1)]:
        p = np.array(fld.origin) + np.array(ijk) * fld.spacing
        assert np.array_equal(sample_field(fld, p), fld.values[ijk])


def test_constant_field_sample():
    fld = constant_field((5, 5, 5), (0.3, -2.0, 1.5))
    assert np.allclose(sample_field(fld, [1.3, 2.7, 0.1]), [0.3, -2.0, 1.5], atol=1e-15)


def test_cell_center_is_corner_mean():
    fld = random_field((2, 2, 2), seed=3)
    center = (fld.lower + fld.upper) / 2
    assert np.allclose(sample_field(fld, center), fld.values.reshape(-1, 3).mean(axis=0), atol=1e-14)


@given(st.integers(0, 2**32))
def test_sample_matches_trilinear_oracle(seed):
    fld = random_field((4, 3, 5), seed % 97)
    p = np.random.default_rng(seed).uniform(fld.lower, fld.upper)
    assert np.allclose(sample_field(fld, p), trilinear_oracle(fld, p), atol=1e-12)


def test_out_of_bounds_sample():
    fld = constant_field((3, 3, 3))
    with pytest.raises(ValueError):
        sample_field(fld, [5.0, 0.0, 0.0])


def test_block_matches_full_field_and_flags_missing_halo():
    fld = random_field((9, 9, 9), seed=1)
    block = fld.block((2, 2, 2), (5, 5, 5), halo=1)
    p = fld.lower + np.array([3.3, 4.1, 2.5]) * fld.spacing
    assert np.array_equal(block.sample(p)[0], fld.block().sample(p)[0])
    with pytest.raises(HaloError):
        block.sample(fld.lower + np.array([8.0, 8.0, 8.0]) * fld.spacing)


# --- RK4 -------------------------------------------------------------------

def test_constant_field_step_is_exact():
    fld = constant_field((5, 5, 5), (1.0, 0.0, 0.0))
    new = rk4_step(fld, [1.0, 1.0, 1.0], 0.1)
    assert np.allclose(new, [1.1, 1.0, 1.0], rtol=0, atol=1e-15)


def test_zero_field_terminates():
    fld = constant_field((3, 3, 3), (0.0, 0.0, 0.0))
    assert rk4_step(fld, [1.0, 1.0, 1.0], 0.1) is None


def test_leaving_domain_terminates():
    fld = constant_field((3, 3, 3), (1.0, 0.0, 0.0))
    assert rk4_step(fld, [1.95, 1.0, 1.0], 0.1) is None


def integrate_circle(h, n):
    fld = rotation_field(16)
    p = np.array([1.0, 0.0, 0.5])
    for _ in range(n):
        p = rk4_step(fld, p, h)
    return p


def test_rotation_628_steps():
    # 628 steps of 0.01 cover angle 6.28, just short of a full turn; the
    # remaining chord is 2 sin((2 pi - 6.28) / 2)
    p = integrate_circle(0.01, 628)
    gap = np.linalg.norm(p[:2] - [1.0, 0.0])
    expected = 2 * math.sin((2 * math.pi - 6.28) / 2)
    assert abs(gap - expected) < 1e-8
    assert abs(math.atan2(p[1], p[0]) - (6.28 - 2 * math.pi)) < 1e-8


def test_rotation_field_is_sampled_exactly():
    fld = rotation_field(16)
    p = np.array([0.37, -0.81, 0.5])
    assert np.allclose(sample_field(fld, p), [0.81, 0.37, 0.0], atol=1e-14)


# --- partition -------------------------------------------------------------

def test_owner_interior_and_outside():
    fld = constant_field((17, 17, 17))
    part = GridPartition.for_field(fld, 4, (2, 2, 1))
    lo, hi = part.cell_bounds(2)
    assert part.owner_of((lo + hi) / 2) == 2
    assert part.owner_of(fld.upper + 0.5) == OUTSIDE
    assert part.owner_of(fld.lower - 1e-9) == OUTSIDE


def test_shared_face_goes_to_lower_cell():
    fld = constant_field((17, 17, 17))
    part = GridPartition.for_field(fld, 2, (2, 1, 1))
    lo0, hi0 = part.cell_bounds(0)
    lo1, hi1 = part.cell_bounds(1)
    assert hi0[0] == lo1[0]
    face = np.array([hi0[0], 3.0, 3.0])
    assert part.owner_of(face) == 0
    assert part.owner_of(face + [1e-9, 0, 0]) == 1


@given(st.integers(1, 8), st.integers(0, 2**32))
def test_owner_matches_box_scan(R, seed):
    fld = constant_field((13, 11, 9))
    part = GridPartition.for_field(fld, R)
    p = np.random.default_rng(seed).uniform(fld.lower, fld.upper, size=(20, 3))
    owners = part.owner_of(p)
    for q, o in zip(p, owners):
        cells = [c for c in range(part.num_cells)
                 if np.all(q >= part.cell_bounds(c)[0]) and np.all(q <= part.cell_bounds(c)[1])]
        assert o == part.rank_of_cell(min(cells))


def test_halo_width():
    fld = constant_field((9, 9, 9), (2.0, 0.0, 0.0))
    assert halo_width(fld, 0.25) == 2
    assert halo_width(fld, 1.0) == 3


# --- advection round -------------------------------------------------------

def test_advect_round_routing():
    fld = constant_field((17, 9, 9), (1.0, 0.0, 0.0))

    def prog(rank, comm):
        part = GridPartition.for_field(fld, 2, (2, 1, 1))
        lo, hi = part.rank_vertex_range(rank)
        block = fld.block(lo, hi, halo_width(fld, 0.5))
        ctx = create_context(comm, WorkItemSchema(TRACE_PARTICLE), 8)
        if rank == 0:
            # id 0 stays inside, id 1 crosses x=8, id 2 is at its last step
            ctx.set_incoming(np.array([(0, 1, (2.0, 4, 4)), (1, 1, (7.8, 4, 4)), (2, 4, (3.0, 4, 4))],
                                      TRACE_PARTICLE))
        points = []
        emitted = advect_round(ctx.view(), block, part, StreamlineParams(0.5, 5), points)
        dests = ctx._dests[:ctx.num_emitted].tolist()
        ids = ctx._output[:ctx.num_emitted]["id"].tolist()
        rec = np.concatenate(points) if points else np.zeros(0, STREAM_POINT)
        return emitted, sorted(zip(ids, dests)), sorted(rec["id"].tolist())

    out = spmd(2, prog)
    assert out[0] == (2, [(0, 0), (1, 1)], [0, 1, 2])
    assert out[1] == (0, [], [])


# --- full runs -------------------------------------------------------------

def test_single_seed_straight_line():
    fld = constant_field((16, 16, 16), (1.0, 0.0, 0.0))
    run = run_streamlines(StreamlineConfig(fld, np.array([[1.0, 5.0, 5.0]]), h=0.5, max_steps=10))
    line = run.streamlines[0]
    assert line.shape == (11, 3)
    assert np.allclose(line[:, 0], 1.0 + 0.5 * np.arange(11)) and np.all(line[:, 1:] == 5.0)


def test_seed_outside_domain_is_empty():
    fld = constant_field((8, 8, 8))
    run = run_streamlines(StreamlineConfig(fld, np.array([[100.0, 0, 0], [1.0, 1, 1]]), h=0.5,
                                           max_steps=3), 2)
    assert len(run.streamlines[0]) == 0 and len(run.streamlines[1]) == 4


def test_capacity_below_seeds_is_config_error():
    with pytest.raises(Exception, match="capacity"):
        run_streamlines(StreamlineConfig("constant:8", np.ones((5, 3)), capacity=3))


@pytest.mark.parametrize("R,macro", [(2, None), (3, None), (4, (1, 2, 2)), (5, (3, 3, 1))])
def test_partition_independence_small(R, macro):
    fld = abc_field(16)
    seeds = np.random.default_rng(4).uniform(0.5, 5.5, size=(12, 3))
    base = run_streamlines(StreamlineConfig(fld, seeds, h=0.05, max_steps=80))
    other = run_streamlines(StreamlineConfig(fld, seeds, h=0.05, max_steps=80, macro_dims=macro), R)
    assert base.rounds == other.rounds
    for i in range(len(seeds)):
        assert base.streamlines[i].shape == other.streamlines[i].shape
        assert np.max(np.abs(base.streamlines[i] - other.streamlines[i]), initial=0) <= 1e-6


def test_liveness_non_increasing():
    fld = abc_field(16)
    seeds = np.random.default_rng(7).uniform(0.5, 5.5, size=(20, 3))
    run = run_streamlines(StreamlineConfig(fld, seeds, h=0.1, max_steps=30), 3)
    live = np.sum([v.live_per_round for v in run.report.values], axis=0)
    assert np.all(np.diff(live) <= 0)
    assert run.rounds <= 30 + 1


# --- I/O -------------------------------------------------------------------

def test_field_roundtrip(tmp_path):
    fld = random_field((3, 4, 5), seed=9)
    save_field(fld, str(tmp_path / "f.json"))
    back = load_field(str(tmp_path / "f.json"))
    assert back.dims == fld.dims and back.spacing == fld.spacing and back.origin == fld.origin
    assert np.array_equal(back.values, fld.values.astype(np.float32).astype(np.float64))
    raw = np.fromfile(tmp_path / "f.raw", dtype="<f4")
    assert raw[:3].tolist() == fld.values[0, 0, 0].astype(np.float32).tolist()
    assert raw[3:6].tolist() == fld.values[1, 0, 0].astype(np.float32).tolist()


def test_make_field_specs():
    assert make_field("abc:8").dims == (8, 8, 8)
    assert make_field("rotation:8").dims[0] == 8
    assert np.all(make_field("constant:4:0,1,0").values[..., 1] == 1)
    with pytest.raises(ValueError):
        make_field("vortex:3")


def test_streamline_text_format(tmp_path):
    lines = {1: np.array([[0.0, 1.0, 2.0], [0.5, 1.0, 2.0]]), 0: np.array([[3.0, 3.0, 3.0]]),
             2: np.zeros((0, 3))}
    text = format_streamlines(lines)
    assert text == "0 3.0 3.0 3.0\n\n1 0.0 1.0 2.0\n1 0.5 1.0 2.0\n"
    write_streamlines(str(tmp_path / "s.txt"), lines)
    back = read_streamlines(str(tmp_path / "s.txt"))
    assert sorted(back) == [0, 1] and np.array_equal(back[1], lines[1])
