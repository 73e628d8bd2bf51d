"""Round-based distributed streamline tracing.

The vector field lives on a regular vertex grid split into macrocells, one
or more per rank. Every round each rank advances its particles by one RK4
step and emits them to whichever rank owns the new position (possibly
itself). Each rank keeps its macrocells plus a halo of vertices wide enough
that no RK4 stage of an owned particle ever samples outside local data, so
the traced geometry does not depend on the rank count.
"""
from __future__ import annotations

import functools
import json
import logging
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .comm import Communicator
from .forward import EmitView, WorkItemSchema, create_context, gather_items
from .harness import RunReport, launch, run_rounds

logger = logging.getLogger(__name__)

TRACE_PARTICLE = np.dtype([("id", "<u4"), ("steps", "<u4"), ("pos", "<f8", (3,))])
STREAM_POINT = np.dtype([("id", "<u4"), ("step", "<u4"), ("pos", "<f8", (3,))])

OUTSIDE = -1
EPS_MOVE_FACTOR = 1e-7


class HaloError(RuntimeError):
    """An RK4 stage left the locally stored block (halo too thin)."""


@dataclass
class VectorField:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    values: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(d < 2 for d in self.dims):
            raise ValueError("every axis needs at least two vertices")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (*self.dims, 3):
            raise ValueError(f"values shape {self.values.shape} does not match dims {self.dims}")

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.origin) + (np.array(self.dims) - 1) * np.array(self.spacing)

    def max_speed(self) -> float:
        return float(np.sqrt((self.values ** 2).sum(axis=-1)).max())

    def block(self, lo=(0, 0, 0), hi=None, halo: int = 0) -> "FieldBlock":
        """Vertices ``lo..hi`` (inclusive) widened by ``halo`` on each side."""
        dims = np.array(self.dims)
        hi = dims - 1 if hi is None else np.asarray(hi)
        lo = np.maximum(np.asarray(lo) - halo, 0)
        hi = np.minimum(hi + halo, dims - 1)
        sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        return FieldBlock(self.dims, self.spacing, self.origin, tuple(int(x) for x in lo),
                          np.ascontiguousarray(self.values[sl]))


@dataclass
class FieldBlock:
    """A contiguous vertex sub-box of a :class:`VectorField`.

    Sampling uses global grid coordinates, so a block and the full field
    give bit-identical results wherever both hold the needed vertices.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    lo: tuple[int, int, int]
    values: np.ndarray

    def sample(self, pos) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear samples at ``pos`` (n, 3) plus an in-domain mask."""
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        dims = np.array(self.dims)
        g = (pos - np.array(self.origin)) / np.array(self.spacing)
        inside = np.all((g >= 0) & (g <= dims - 1), axis=1)
        i0 = np.clip(np.floor(g), 0, dims - 2).astype(np.int64)
        frac = np.clip(g - i0, 0.0, 1.0)
        local = i0 - np.array(self.lo)
        shape = np.array(self.values.shape[:3])
        in_block = np.all((local >= 0) & (local + 1 < shape), axis=1)
        if np.any(inside & ~in_block):
            bad = pos[np.flatnonzero(inside & ~in_block)[0]]
            raise HaloError(f"sample at {bad} is outside the local block starting at {self.lo}")
        local = np.where(in_block[:, None], local, 0)
        x0, y0, z0 = local.T
        fx, fy, fz = (frac[:, k:k + 1] for k in range(3))
        V = self.values
        c00 = V[x0, y0, z0] * (1 - fx) + V[x0 + 1, y0, z0] * fx
        c10 = V[x0, y0 + 1, z0] * (1 - fx) + V[x0 + 1, y0 + 1, z0] * fx
        c01 = V[x0, y0, z0 + 1] * (1 - fx) + V[x0 + 1, y0, z0 + 1] * fx
        c11 = V[x0, y0 + 1, z0 + 1] * (1 - fx) + V[x0 + 1, y0 + 1, z0 + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz, inside


def sample_field(field: VectorField | FieldBlock, pos) -> np.ndarray:
    """Trilinear interpolation at a single position; raises outside bounds."""
    block = field.block() if isinstance(field, VectorField) else field
    value, inside = block.sample(np.asarray(pos, dtype=np.float64).reshape(1, 3))
    if not inside[0]:
        raise ValueError(f"position {pos} is outside the field")
    return value[0]


def epsilon_move(spacing) -> float:
    return EPS_MOVE_FACTOR * float(np.linalg.norm(spacing))


def rk4_advance(block: FieldBlock, pos, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step for many particles.

    Returns (new positions, alive mask); a particle dies when any stage or
    the result leaves the domain, or when it moved less than epsilon_move.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    k1, ok1 = block.sample(pos)
    k2, ok2 = block.sample(pos + 0.5 * h * k1)
    k3, ok3 = block.sample(pos + 0.5 * h * k2)
    k4, ok4 = block.sample(pos + h * k3)
    new = pos + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dims = np.array(block.dims)
    g = (new - np.array(block.origin)) / np.array(block.spacing)
    ok_end = np.all((g >= 0) & (g <= dims - 1), axis=1)
    moved = np.linalg.norm(new - pos, axis=1) >= epsilon_move(block.spacing)
    return new, ok1 & ok2 & ok3 & ok4 & ok_end & moved


def rk4_step(field: VectorField | FieldBlock, pos, h: float):
    """Single-particle RK4 step; None means the particle terminated."""
    if h <= 0:
        raise ValueError("step size must be positive")
    block = field.block() if isinstance(field, VectorField) else field
    new, alive = rk4_advance(block, np.asarray(pos, dtype=np.float64).reshape(1, 3), h)
    return new[0] if alive[0] else None


def _split_axis(n_vertices: int, parts: int) -> np.ndarray:
    if parts > n_vertices - 1:
        raise ValueError(f"cannot split {n_vertices - 1} cells into {parts} macrocells")
    return np.round(np.linspace(0, n_vertices - 1, parts + 1)).astype(np.int64)


def default_macro_dims(num_ranks: int) -> tuple[int, int, int]:
    """Near-cubic factorisation of the rank count, largest factor on x."""
    dims = [1, 1, 1]
    n = num_ranks
    f = 2
    factors = []
    while n > 1:
        while n % f == 0:
            factors.append(f)
            n //= f
        f += 1
    for p in sorted(factors, reverse=True):
        dims[int(np.argmin(dims))] *= p
    return tuple(sorted(dims, reverse=True))


@dataclass
class GridPartition:
    """Regular macrocell grid over the field's vertex lattice.

    Macrocell ``c`` (x-fastest numbering) belongs to rank ``c % num_ranks``.
    A point on a face shared by two macrocells belongs to the lower one.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    macro_dims: tuple[int, int, int]
    num_ranks: int
    faces: list[np.ndarray] = dc_field(init=False)

    def __post_init__(self):
        self.faces = [_split_axis(n, m) for n, m in zip(self.dims, self.macro_dims)]

    @classmethod
    def for_field(cls, fld: VectorField, num_ranks: int, macro_dims=None) -> "GridPartition":
        macro_dims = tuple(macro_dims) if macro_dims else default_macro_dims(num_ranks)
        return cls(fld.dims, fld.spacing, fld.origin, macro_dims, num_ranks)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.macro_dims))

    def rank_of_cell(self, cell: int) -> int:
        return cell % self.num_ranks

    def cell_index(self, ijk) -> int:
        mx, my, _ = self.macro_dims
        i, j, k = ijk
        return int(i + mx * (j + my * k))

    def cell_vertex_range(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        mx, my, _ = self.macro_dims
        ijk = (cell % mx, (cell // mx) % my, cell // (mx * my))
        lo = np.array([self.faces[a][ijk[a]] for a in range(3)])
        hi = np.array([self.faces[a][ijk[a] + 1] for a in range(3)])
        return lo, hi

    def cell_bounds(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.cell_vertex_range(cell)
        o, s = np.array(self.origin), np.array(self.spacing)
        return o + lo * s, o + hi * s

    def rank_vertex_range(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        cells = [c for c in range(self.num_cells) if self.rank_of_cell(c) == rank]
        if not cells:
            return np.zeros(3, np.int64), np.zeros(3, np.int64)
        ranges = [self.cell_vertex_range(c) for c in cells]
        return np.min([r[0] for r in ranges], axis=0), np.max([r[1] for r in ranges], axis=0)

    def owner_of(self, pos) -> np.ndarray | int:
        """Owning rank per position, or OUTSIDE beyond the domain."""
        p = np.asarray(pos, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        g = (p - np.array(self.origin)) / np.array(self.spacing)
        inside = np.all((g >= 0) & (g <= np.array(self.dims) - 1), axis=1)
        ijk = np.stack([
            np.clip(np.searchsorted(self.faces[a][1:], g[:, a], side="left"), 0, self.macro_dims[a] - 1)
            for a in range(3)], axis=1)
        mx, my, _ = self.macro_dims
        cell = ijk[:, 0] + mx * (ijk[:, 1] + my * ijk[:, 2])
        owner = np.where(inside, cell % self.num_ranks, OUTSIDE)
        return int(owner[0]) if single else owner


def halo_width(fld: VectorField, h: float) -> int:
    """Vertices of halo needed so RK4 stages never leave local data."""
    reach = h * fld.max_speed() / min(fld.spacing)
    return int(math.ceil(reach)) + 1


# --------------------------------------------------------------------------
# synthetic fields and file I/O


def constant_field(dims, value=(1.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    vals = np.broadcast_to(np.asarray(value, dtype=np.float64), (*dims, 3)).copy()
    return VectorField(dims, spacing, origin, vals)


def _grid_points(dims, spacing, origin):
    axes = [o + s * np.arange(n) for n, s, o in zip(dims, spacing, origin)]
    return np.meshgrid(*axes, indexing="ij")


def rotation_field(n: int = 16, extent: float = 1.5, nz: int = 2):
    """Rigid rotation v = (-y, x, 0) on [-extent, extent]^2 x [0, 1]."""
    dims = (n, n, nz)
    spacing = (2 * extent / (n - 1), 2 * extent / (n - 1), 1.0 / (nz - 1))
    origin = (-extent, -extent, 0.0)
    x, y, _ = _grid_points(dims, spacing, origin)
    vals = np.stack([-y, x, np.zeros_like(x)], axis=-1)
    return VectorField(dims, spacing, origin, vals)


def abc_field(n: int = 64, A: float = math.sqrt(3), B: float = math.sqrt(2), C: float = 1.0):
    """Arnold-Beltrami-Childress flow sampled on [0, 2pi]^3."""
    s = 2 * math.pi / (n - 1)
    dims, spacing, origin = (n, n, n), (s, s, s), (0.0, 0.0, 0.0)
    x, y, z = _grid_points(dims, spacing, origin)
    vals = np.stack([A * np.sin(z) + C * np.cos(y),
                     B * np.sin(x) + A * np.cos(z),
                     C * np.sin(y) + B * np.cos(x)], axis=-1)
    return VectorField(dims, spacing, origin, vals)


def save_field(fld: VectorField, header_path: str, data_path: str | None = None) -> None:
    """Write a JSON header plus raw little-endian float32 x-fastest data."""
    if data_path is None:
        data_path = os.path.splitext(header_path)[0] + ".raw"
    # x-fastest == C order over (z, y, x, component)
    fld.values.transpose(2, 1, 0, 3).astype("<f4").tofile(data_path)
    header = {"dims": list(fld.dims), "spacing": list(fld.spacing), "origin": list(fld.origin),
              "data": os.path.relpath(data_path, os.path.dirname(os.path.abspath(header_path)))}
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2)


def load_field(header_path: str) -> VectorField:
    with open(header_path) as fh:
        header = json.load(fh)
    dims = tuple(header["dims"])
    data_path = header["data"]
    if not os.path.isabs(data_path):
        data_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), data_path)
    raw = np.fromfile(data_path, dtype="<f4")
    nx, ny, nz = dims
    if raw.size != nx * ny * nz * 3:
        raise ValueError(f"{data_path}: expected {nx * ny * nz * 3} floats, found {raw.size}")
    vals = raw.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).astype(np.float64)
    return VectorField(dims, header["spacing"], header.get("origin", (0, 0, 0)), vals)


def make_field(spec) -> VectorField:
    """Field from a VectorField, a header path, or 'abc:N', 'rotation:N',
    'constant:N:vx,vy,vz'."""
    if isinstance(spec, VectorField):
        return spec
    if spec.endswith(".json"):
        return load_field(spec)
    kind, *args = spec.split(":")
    if kind == "abc":
        return abc_field(int(args[0]) if args else 64)
    if kind == "rotation":
        return rotation_field(int(args[0]) if args else 16)
    if kind == "constant":
        n = int(args[0]) if args else 16
        value = tuple(float(v) for v in args[1].split(",")) if len(args) > 1 else (1.0, 0.0, 0.0)
        return constant_field((n, n, n), value)
    raise ValueError(f"unknown field spec {spec!r}")


# --------------------------------------------------------------------------
# distributed driver


@dataclass
class StreamlineParams:
    h: float
    max_steps: int


def advect_round(view: EmitView, block: FieldBlock, partition: GridPartition,
                 params: StreamlineParams, points: list) -> int:
    """Advance every incoming particle one step and route survivors.

    Accepted positions are appended to ``points`` as STREAM_POINT arrays;
    the sending rank records the step that crosses into a neighbour.
    Returns how many particles were emitted.
    """
    inc = view.incoming()
    if len(inc) == 0:
        return 0
    fresh = inc["steps"] == 0
    if np.any(fresh):
        rec = np.zeros(int(fresh.sum()), dtype=STREAM_POINT)
        rec["id"] = inc["id"][fresh]
        rec["pos"] = inc["pos"][fresh]
        points.append(rec)

    active = inc[inc["steps"] < params.max_steps]
    if len(active) == 0:
        return 0
    new, alive = rk4_advance(block, active["pos"], params.h)
    moved = active[alive].copy()
    moved["pos"] = new[alive]
    moved["steps"] += 1
    rec = np.zeros(len(moved), dtype=STREAM_POINT)
    rec["id"], rec["step"], rec["pos"] = moved["id"], moved["steps"], moved["pos"]
    points.append(rec)

    moved = moved[moved["steps"] < params.max_steps]
    owners = partition.owner_of(moved["pos"]) if len(moved) else np.empty(0, np.int64)
    keep = owners != OUTSIDE
    return view.emit_many(moved[keep], owners[keep])


@dataclass
class StreamlineConfig:
    field: object = "abc:64"
    seeds: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 3)))
    h: float | None = None
    max_steps: int = 1000
    macro_dims: tuple | None = None
    capacity: int | None = None

    def step_size(self, fld: VectorField) -> float:
        return self.h if self.h is not None else 0.25 * min(fld.spacing)


@dataclass
class RankTraceResult:
    rounds: int
    live_per_round: list[int]
    streamlines: dict | None


def streamline_program(rank: int, comm: Communicator, cfg: StreamlineConfig) -> RankTraceResult:
    fld = make_field(cfg.field)
    seeds = np.asarray(cfg.seeds, dtype=np.float64).reshape(-1, 3)
    n_seeds = len(seeds)
    capacity = cfg.capacity if cfg.capacity is not None else max(n_seeds, 1)
    if capacity < n_seeds:
        raise ValueError(f"queue capacity {capacity} is below the {n_seeds} seeds a rank may hold")
    h = cfg.step_size(fld)
    if h <= 0:
        raise ValueError("step size must be positive")
    partition = GridPartition.for_field(fld, comm.size, cfg.macro_dims)
    lo, hi = partition.rank_vertex_range(rank)
    block = fld.block(lo, hi, halo_width(fld, h))
    del fld
    params = StreamlineParams(h, cfg.max_steps)

    ctx = create_context(comm, WorkItemSchema(TRACE_PARTICLE, "trace_particle"), capacity)
    view = ctx.view()
    if rank == 0 and n_seeds:
        items = np.zeros(n_seeds, dtype=TRACE_PARTICLE)
        items["id"] = np.arange(n_seeds)
        items["pos"] = seeds
        owners = partition.owner_of(seeds)
        keep = owners != OUTSIDE
        view.emit_many(items[keep], owners[keep])
    ctx.forward()

    points: list = []
    live: list[int] = []

    def step(v):
        live.append(v.num_incoming())
        advect_round(v, block, partition, params, points)

    rounds = run_rounds(ctx, step)
    local = np.concatenate(points) if points else np.zeros(0, dtype=STREAM_POINT)
    gathered = gather_items(comm, local, STREAM_POINT, root=0, name="stream_point")
    lines = None
    if rank == 0:
        lines = assemble_streamlines(gathered, n_seeds)
    return RankTraceResult(rounds, live, lines)


def assemble_streamlines(points: np.ndarray, n_seeds: int) -> dict[int, np.ndarray]:
    order = np.lexsort((points["step"], points["id"]))
    pts = points[order]
    out = {i: np.zeros((0, 3)) for i in range(n_seeds)}
    if len(pts):
        ids, starts = np.unique(pts["id"], return_index=True)
        for i, a, b in zip(ids, starts, list(starts[1:]) + [len(pts)]):
            steps = pts["step"][a:b]
            if np.any(steps != np.arange(len(steps))):
                raise RuntimeError(f"streamline {i} has missing or duplicate steps")
            out[int(i)] = pts["pos"][a:b].copy()
    return out


@dataclass
class StreamlineRun:
    streamlines: dict[int, np.ndarray]
    rounds: int
    report: RunReport


def run_streamlines(cfg: StreamlineConfig, num_ranks: int = 1,
                    transport: str = "in_process") -> StreamlineRun:
    report = launch(num_ranks, transport, functools.partial(streamline_program, cfg=cfg))
    root = report.values[0]
    rounds = {v.rounds for v in report.values}
    if len(rounds) != 1:
        raise RuntimeError(f"ranks disagree on round count: {rounds}")
    return StreamlineRun(root.streamlines, rounds.pop(), report)


def format_streamlines(streamlines: dict[int, np.ndarray]) -> str:
    """Lines 'id x y z', one blank line between streamlines, ids ascending."""
    blocks = []
    for i in sorted(streamlines):
        pts = streamlines[i]
        if len(pts):
            blocks.append("\n".join(f"{i} {x!r} {y!r} {z!r}" for x, y, z in pts.tolist()))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def write_streamlines(path: str, streamlines: dict[int, np.ndarray]) -> None:
    with open(path, "w") as fh:
        fh.write(format_streamlines(streamlines))


def read_streamlines(path: str) -> dict[int, np.ndarray]:
    out: dict[int, list] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out.setdefault(int(parts[0]), []).append([float(v) for v in parts[1:4]])
    return {i: np.array(p) for i, p in out.items()}


def random_seeds(fld: VectorField, n: int, seed: int = 0, margin: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo, hi = fld.lower, fld.upper
    pad = margin * (hi - lo)
    return rng.uniform(lo + pad, hi - pad, size=(n, 3))
