"""Distributed Barnes-Hut N-body driver.

Three forwarding contexts carry the traffic: particles (migration after each
drift), virtual particles and refinement requests (essential-tree
exchange). Within a step they are always forwarded in the same order on
every rank.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..comm import Communicator
from ..forward import ForwardingContext, WorkItemSchema, create_context, gather_items
from ..harness import RunReport, launch
from .exchange import PARTICLE, REFINEMENT_REQ, VIRTUAL_PARTICLE, essential_tree_exchange
from .morton import DEFAULT_BITS, MortonPartition
from .tree import build_tree, tree_accelerations

logger = logging.getLogger(__name__)

G = 1.0

TRACE_ROW = np.dtype([("step", "<i4"), ("context", "<i4"), ("src", "<i4"),
                      ("dst", "<i4"), ("count", "<i8")])
_CONTEXTS = ("particle", "virtual_particle", "refinement_req")


@dataclass
class NBodyConfig:
    n: int = 512
    steps: int = 10
    theta: float = 0.5
    dt: float = 1e-3
    softening: float | None = None  # default: 1e-2 of the domain scale
    quadrupole: bool = False
    seed: int = 0
    distribution: str = "uniform"
    bits: int = DEFAULT_BITS
    snapshot_every: int = 0
    snapshot_dir: str | None = None
    comm_trace: str | None = None
    diagnostics: bool = True


def initial_particles(n: int, seed: int = 0, distribution: str = "uniform") -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = np.zeros(n, dtype=PARTICLE)
    if distribution == "uniform":
        p["pos"] = rng.uniform(-1.0, 1.0, size=(n, 3))
        p["vel"] = rng.normal(scale=0.05, size=(n, 3))
    elif distribution == "plummer":
        r = 1.0 / np.sqrt(rng.uniform(0.01, 0.99, n) ** (-2.0 / 3.0) - 1.0)
        u = rng.normal(size=(n, 3))
        p["pos"] = np.clip(r, 0, 5)[:, None] * u / np.linalg.norm(u, axis=1, keepdims=True)
        p["vel"] = rng.normal(scale=0.1, size=(n, 3))
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    p["mass"] = rng.uniform(0.5, 1.5, n) / n
    p["id"] = np.arange(n)
    return p


def global_bounds(pos, pad: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    margin = pad * max(float(np.max(hi - lo)), 1e-12)
    return lo - margin, hi + margin


def default_softening(lower, upper) -> float:
    return 1e-2 * float(np.max(np.asarray(upper) - np.asarray(lower)))


def kick(p: np.ndarray, dt: float) -> None:
    p["vel"] += p["force"] / p["mass"][:, None] * dt


def drift(p: np.ndarray, dt: float) -> None:
    p["pos"] += p["vel"] * dt


def leapfrog_step(p: np.ndarray, dt: float, recompute) -> np.ndarray:
    """Kick-drift-kick. ``recompute(p)`` refreshes forces after the drift
    (and may return a different array, e.g. after migration)."""
    kick(p, dt / 2)
    drift(p, dt)
    p = recompute(p)
    kick(p, dt / 2)
    return p


def migrate(pctx: ForwardingContext, particles: np.ndarray, partition: MortonPartition) -> np.ndarray:
    """Send every particle to the owner of its position; collective."""
    view = pctx.view()
    owners = partition.owner_of_particle(particles["pos"]) if len(particles) else np.empty(0, np.int64)
    accepted = view.emit_many(particles, owners)
    if accepted != len(particles):
        raise RuntimeError(f"rank {pctx.comm.rank}: particle queue dropped "
                           f"{len(particles) - accepted} particles")
    pctx.forward()
    return view.incoming().copy()


def local_bounds(particles: np.ndarray):
    if len(particles) == 0:
        return None
    return particles["pos"].min(axis=0), particles["pos"].max(axis=0)


def compute_forces(particles: np.ndarray, tree, imported, theta: float, softening: float,
                   quadrupole: bool = False) -> None:
    """Local tree (self excluded) plus every imported tree, in rank order."""
    pos = particles["pos"]
    acc = tree_accelerations(tree, pos, theta, softening, G, quadrupole,
                             exclude=np.arange(len(particles)))
    for remote in imported:
        acc += tree_accelerations(remote, pos, theta, softening, G, quadrupole)
    particles["force"] = particles["mass"][:, None] * acc


def exchange_and_forces(comm: Communicator, particles: np.ndarray, vctx, rctx, theta, softening,
                        quadrupole) -> int:
    tree = build_tree(particles["pos"], particles["mass"], source_rank=comm.rank)
    imported, rounds = essential_tree_exchange(tree, local_bounds(particles), vctx, rctx, theta)
    compute_forces(particles, tree, imported, theta, softening, quadrupole)
    return rounds


def forest_forces(per_rank: list[np.ndarray], theta: float, softening: float,
                  quadrupole: bool = False) -> list[np.ndarray]:
    """Single-process reference: each rank's particles see their own tree and
    the complete trees of every other rank."""
    trees = [build_tree(p["pos"], p["mass"], source_rank=r) for r, p in enumerate(per_rank)]
    out = []
    for r, p in enumerate(per_rank):
        acc = tree_accelerations(trees[r], p["pos"], theta, softening, G, quadrupole,
                                 exclude=np.arange(len(p)))
        for s, t in enumerate(trees):
            if s != r and t.size:
                acc += tree_accelerations(t, p["pos"], theta, softening, G, quadrupole)
        out.append(p["mass"][:, None] * acc)
    return out


def total_energy(p: np.ndarray, softening: float) -> float:
    kin = 0.5 * float((p["mass"] * (p["vel"] ** 2).sum(axis=1)).sum())
    d = p["pos"][:, None, :] - p["pos"][None, :, :]
    r = np.sqrt((d * d).sum(axis=-1) + softening ** 2)
    iu = np.triu_indices(len(p), 1)
    pot = -G * float((p["mass"][iu[0]] * p["mass"][iu[1]] / r[iu]).sum())
    return kin + pot


@dataclass
class StepDiagnostics:
    step: int
    count: int
    mass: float
    momentum: np.ndarray
    exchange_rounds: int


@dataclass
class NBodyResult:
    particles: np.ndarray | None
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    local_counts: list[int] = field(default_factory=list)


def _trace_rows(pctx, vctx, rctx, step, since) -> list[tuple]:
    rows = []
    for cid, ctx in enumerate((pctx, vctx, rctx)):
        for st in ctx.history[since[cid]:]:
            for dst, c in enumerate(st.sent):
                if c:
                    rows.append((step, cid, st.rank, dst, c))
        since[cid] = len(ctx.history)
    return rows


def nbody_program(rank: int, comm: Communicator, cfg: NBodyConfig) -> NBodyResult:
    R = comm.size
    everything = initial_particles(cfg.n, cfg.seed, cfg.distribution)
    lower, upper = global_bounds(everything["pos"])
    partition = MortonPartition.balanced(everything["pos"], R, lower, upper, cfg.bits)
    softening = cfg.softening if cfg.softening is not None else default_softening(lower, upper)
    # identical initial conditions everywhere: each rank keeps what it owns
    local = everything[partition.owner_of_particle(everything["pos"]) == rank].copy()
    del everything

    budget = max(math.ceil(cfg.n / R), 8)
    pctx = create_context(comm, WorkItemSchema(PARTICLE, "particle"), 2 * budget)
    vctx = create_context(comm, WorkItemSchema(VIRTUAL_PARTICLE, "virtual_particle"), 4 * max(cfg.n, 8))
    rctx = create_context(comm, WorkItemSchema(REFINEMENT_REQ, "refinement_req"), 4 * max(cfg.n, 8))
    result = NBodyResult(None)
    trace: list[tuple] = []
    since = [0, 0, 0]

    def refresh(p):
        nonlocal exchange_rounds
        p = migrate(pctx, p, partition)
        exchange_rounds = exchange_and_forces(comm, p, vctx, rctx, cfg.theta, softening,
                                              cfg.quadrupole)
        return p

    exchange_rounds = exchange_and_forces(comm, local, vctx, rctx, cfg.theta, softening,
                                          cfg.quadrupole)
    trace += _trace_rows(pctx, vctx, rctx, 0, since)
    _diagnose(comm, cfg, local, 0, exchange_rounds, result)

    for step in range(1, cfg.steps + 1):
        local = leapfrog_step(local, cfg.dt, refresh)
        result.local_counts.append(len(local))
        trace += _trace_rows(pctx, vctx, rctx, step, since)
        _diagnose(comm, cfg, local, step, exchange_rounds, result)

    final = gather_items(comm, local, PARTICLE, name="final_particles")
    if rank == 0:
        result.particles = np.sort(final, order="id")
    if cfg.comm_trace:
        rows = gather_items(comm, np.array(trace, dtype=TRACE_ROW), TRACE_ROW, name="trace")
        if rank == 0:
            _write_trace(cfg.comm_trace, rows)
    return result


def _diagnose(comm, cfg: NBodyConfig, local, step, rounds, result: NBodyResult):
    snap = cfg.snapshot_every and cfg.snapshot_dir and step % cfg.snapshot_every == 0
    if not (cfg.diagnostics or snap):
        return
    allp = gather_items(comm, local, PARTICLE, name="diagnostics")
    if comm.rank != 0:
        return
    allp = np.sort(allp, order="id")
    if cfg.diagnostics:
        result.diagnostics.append(StepDiagnostics(
            step=step, count=len(allp), mass=math.fsum(allp["mass"].tolist()),
            momentum=(allp["mass"][:, None] * allp["vel"]).sum(axis=0),
            exchange_rounds=rounds))
    if snap:
        os.makedirs(cfg.snapshot_dir, exist_ok=True)
        path = os.path.join(cfg.snapshot_dir, f"snapshot_{step:06d}.txt")
        np.savetxt(path, np.column_stack([allp["pos"], allp["mass"]]), fmt="%.17g",
                   header="x y z m", comments="")


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "context", "src", "dst", "count"])
        for r in np.sort(rows, order=["step", "context", "src", "dst"]):
            w.writerow([int(r["step"]), _CONTEXTS[r["context"]], int(r["src"]), int(r["dst"]),
                        int(r["count"])])


def run_nbody(cfg: NBodyConfig, num_ranks: int = 1, transport: str = "in_process"):
    report = launch(num_ranks, transport, functools.partial(nbody_program, cfg=cfg))
    return report.values[0], report


def force_program(rank: int, comm: Communicator, particles: np.ndarray, partition: MortonPartition,
                  theta: float, softening: float, quadrupole: bool = False):
    """One force evaluation from a shared particle set; returns the local
    particles with forces, the imported trees and the local tree."""
    local = particles[partition.owner_of_particle(particles["pos"]) == rank].copy()
    tree = build_tree(local["pos"], local["mass"], source_rank=rank)
    vctx = create_context(comm, WorkItemSchema(VIRTUAL_PARTICLE, "virtual_particle"), 4 * max(len(particles), 8))
    rctx = create_context(comm, WorkItemSchema(REFINEMENT_REQ, "refinement_req"), 4 * max(len(particles), 8))
    imported, rounds = essential_tree_exchange(tree, local_bounds(local), vctx, rctx, theta)
    compute_forces(local, tree, imported, theta, softening, quadrupole)
    return local, imported, rounds


def run_report_forces(report: RunReport) -> np.ndarray:
    """Concatenate force_program results sorted by particle id."""
    parts = np.concatenate([v[0] for v in report.values])
    return np.sort(parts, order="id")
