"""Barnes-Hut octree with monopole and traceless quadrupole moments.

Nodes are stored in flat arrays in depth-first pre-order (a parent always
precedes its children; children are in Morton octant order). A node holding
at most ``leaf_capacity`` particles is a bucket whose children are one
single-particle leaf per particle. Single-particle leaves have ``smax = 0``
and are always accepted by the opening criterion, since their monopole is
exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF_CAPACITY = 8
_MAX_DEPTH = 48

# quadrupole component order
XX, YY, ZZ, XY, XZ, YZ = range(6)


class EssentialTreeError(RuntimeError):
    """Force evaluation needed a remote node that was never refined."""


@dataclass
class BHTree:
    com: np.ndarray        # (M, 3)
    mass: np.ndarray       # (M,)
    smax: np.ndarray       # (M,)  0 for single-particle leaves
    quad: np.ndarray       # (M, 6)
    child_ptr: np.ndarray  # (M + 1,) CSR offsets into ``children``
    children: np.ndarray
    particle: np.ndarray   # (M,) local particle index for leaves, else -1
    node_id: np.ndarray    # (M,) id in the owning rank's tree
    parent: np.ndarray     # (M,) parent node_id, -1 for the root
    lower: np.ndarray | None = None  # (M, 3) node boxes (local trees only)
    upper: np.ndarray | None = None
    source_rank: int = -1

    @property
    def size(self) -> int:
        return len(self.mass)

    def num_children(self, node) -> np.ndarray:
        node = np.asarray(node)
        return self.child_ptr[node + 1] - self.child_ptr[node]

    def children_of(self, node: int) -> np.ndarray:
        return self.children[self.child_ptr[node]:self.child_ptr[node + 1]]

    def is_leaf(self, node) -> np.ndarray:
        return self.smax[node] == 0


def quadrupole_of(points, masses, center) -> np.ndarray:
    """Traceless Q = sum m (3 d d^T - |d|^2 I) about ``center``, 6 comps."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    m = np.asarray(masses, dtype=np.float64)
    r2 = (d * d).sum(axis=-1)
    q = np.empty(d.shape[:-1] + (6,))
    q[..., XX] = 3 * d[..., 0] ** 2 - r2
    q[..., YY] = 3 * d[..., 1] ** 2 - r2
    q[..., ZZ] = 3 * d[..., 2] ** 2 - r2
    q[..., XY] = 3 * d[..., 0] * d[..., 1]
    q[..., XZ] = 3 * d[..., 0] * d[..., 2]
    q[..., YZ] = 3 * d[..., 1] * d[..., 2]
    return (m[..., None] * q).sum(axis=0)


def _quad_matvec(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.stack([
        q[:, XX] * r[:, 0] + q[:, XY] * r[:, 1] + q[:, XZ] * r[:, 2],
        q[:, XY] * r[:, 0] + q[:, YY] * r[:, 1] + q[:, YZ] * r[:, 2],
        q[:, XZ] * r[:, 0] + q[:, YZ] * r[:, 1] + q[:, ZZ] * r[:, 2],
    ], axis=1)


def build_tree(pos, mass, leaf_capacity: int = LEAF_CAPACITY, source_rank: int = -1) -> BHTree:
    """Octree over the bounding cube of ``pos`` with exact aggregation."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    mass = np.asarray(mass, dtype=np.float64).reshape(-1)
    n = len(pos)
    kids: list[list[int]] = []
    particle: list[int] = []
    parent: list[int] = []
    lows: list[np.ndarray] = []
    highs: list[np.ndarray] = []
    side: list[float] = []

    def new_node(par, lo, hi, p=-1):
        kids.append([])
        particle.append(p)
        parent.append(par)
        lows.append(lo)
        highs.append(hi)
        side.append(0.0 if p >= 0 else float(np.max(hi - lo)))
        if par >= 0:
            kids[par].append(len(kids) - 1)
        return len(kids) - 1

    def build(idx, center, half, depth, par):
        lo, hi = center - half, center + half
        if len(idx) == 1:
            return new_node(par, lo, hi, int(idx[0]))
        node = new_node(par, lo, hi)
        if len(idx) <= leaf_capacity or depth >= _MAX_DEPTH:
            for i in idx:
                p = pos[i]
                new_node(node, p.copy(), p.copy(), int(i))
            return node
        p = pos[idx]
        octant = (p[:, 0] >= center[0]).astype(np.int64) \
            | ((p[:, 1] >= center[1]).astype(np.int64) << 1) \
            | ((p[:, 2] >= center[2]).astype(np.int64) << 2)
        for o in range(8):
            sub = idx[octant == o]
            if len(sub):
                offset = np.array([1.0 if o & 1 else -1.0, 1.0 if o & 2 else -1.0,
                                   1.0 if o & 4 else -1.0]) * (half / 2)
                build(sub, center + offset, half / 2, depth + 1, node)
        return node

    if n:
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        center = (lo + hi) / 2
        half = max(float(np.max(hi - lo)) / 2, 1e-12) * (1 + 1e-9)
        build(np.arange(n), center, half, 0, -1)

    m_nodes = len(kids)
    counts = np.array([len(k) for k in kids], dtype=np.int64)
    child_ptr = np.zeros(m_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=child_ptr[1:])
    children = np.array([c for k in kids for c in k], dtype=np.int64)
    particle_arr = np.array(particle, dtype=np.int64)
    node_mass = np.zeros(m_nodes)
    com = np.zeros((m_nodes, 3))
    quad = np.zeros((m_nodes, 6))
    # pre-order: iterating backwards visits children before parents
    for node in range(m_nodes - 1, -1, -1):
        p = particle_arr[node]
        if p >= 0:
            node_mass[node] = mass[p]
            com[node] = pos[p]
            continue
        ch = children[child_ptr[node]:child_ptr[node + 1]]
        m = node_mass[ch]
        node_mass[node] = m.sum()
        com[node] = (m[:, None] * com[ch]).sum(axis=0) / node_mass[node]
        # parallel-axis shift of each child's moment to this node's COM
        quad[node] = quad[ch].sum(axis=0) + quadrupole_of(com[ch], m, com[node])

    return BHTree(
        com=com, mass=node_mass, smax=np.array(side, dtype=np.float64), quad=quad,
        child_ptr=child_ptr, children=children, particle=particle_arr,
        node_id=np.arange(m_nodes, dtype=np.int64), parent=np.array(parent, dtype=np.int64),
        lower=np.array(lows).reshape(-1, 3), upper=np.array(highs).reshape(-1, 3),
        source_rank=source_rank)


def mac_accept(smax, distance, theta: float):
    """Opening criterion: accept a node when smax / distance < theta.

    Leaves (smax == 0) are always accepted; a non-leaf at zero distance is
    always rejected.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    smax = np.asarray(smax, dtype=np.float64)
    distance = np.asarray(distance, dtype=np.float64)
    out = (smax == 0) | ((distance > 0) & (smax < theta * distance))
    return bool(out) if out.ndim == 0 else out


def _expand(tree: BHTree, nodes: np.ndarray, owners: np.ndarray):
    counts = tree.child_ptr[nodes + 1] - tree.child_ptr[nodes]
    total = int(counts.sum())
    starts = tree.child_ptr[nodes]
    base = np.repeat(starts - (np.cumsum(counts) - counts), counts)
    return np.repeat(owners, counts), tree.children[base + np.arange(total)]


def tree_accelerations(tree: BHTree, pos, theta: float, softening: float, G: float = 1.0,
                       quadrupole: bool = False, exclude=None, used: list | None = None) -> np.ndarray:
    """Barnes-Hut accelerations at ``pos`` from every particle in ``tree``.

    ``exclude[i]`` is the tree particle index to skip for target ``i``
    (self-interaction). When ``used`` is a list, the accepted (target, node)
    pairs of each level are appended to it.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    acc = np.zeros_like(pos)
    if tree.size == 0 or len(pos) == 0:
        return acc
    eps2 = softening * softening
    tgt = np.arange(len(pos))
    node = np.zeros(len(pos), dtype=np.int64)
    while len(tgt):
        d = tree.com[node] - pos[tgt]
        r2 = (d * d).sum(axis=1)
        r = np.sqrt(r2)
        s = tree.smax[node]
        leaf = s == 0
        accept = leaf | ((r > 0) & (s < theta * r))
        if exclude is not None:
            own = leaf & (tree.particle[node] == np.asarray(exclude)[tgt])
            accept &= ~own
            reject = ~accept & ~own
        else:
            reject = ~accept

        a_t, a_n, a_d, a_r2 = tgt[accept], node[accept], d[accept], r2[accept]
        if used is not None:
            used.append((a_t, a_n))
        denom = (a_r2 + eps2) ** 1.5
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(denom > 0, G * tree.mass[a_n] / denom, 0.0)
        contrib = scale[:, None] * a_d
        if quadrupole:
            far = tree.smax[a_n] > 0
            if np.any(far):
                rv = -a_d[far]
                rr2 = a_r2[far]
                rr = np.sqrt(rr2)
                q = tree.quad[a_n[far]]
                qr = _quad_matvec(q, rv)
                rqr = (rv * qr).sum(axis=1)
                contrib[far] += G * (qr / (rr2 * rr2 * rr)[:, None]
                                     - 2.5 * (rqr / (rr2 * rr2 * rr2 * rr))[:, None] * rv)
        np.add.at(acc, a_t, contrib)

        r_t, r_n = tgt[reject], node[reject]
        if len(r_n):
            unrefined = tree.num_children(r_n) == 0
            if np.any(unrefined):
                bad = int(r_n[np.flatnonzero(unrefined)[0]])
                raise EssentialTreeError(
                    f"node {tree.node_id[bad]} of rank {tree.source_rank} must be opened "
                    f"but its children were never imported")
        tgt, node = _expand(tree, r_n, r_t)
    return acc


def direct_accelerations(pos, mass, softening: float, G: float = 1.0, targets=None) -> np.ndarray:
    """O(N^2) softened accelerations, excluding self-interaction."""
    pos = np.asarray(pos, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    tpos = pos if targets is None else np.asarray(targets, dtype=np.float64)
    d = pos[None, :, :] - tpos[:, None, :]
    r2 = (d * d).sum(axis=-1) + softening * softening
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(r2 > 0, G * mass[None, :] / r2 ** 1.5, 0.0)
    if targets is None:
        np.fill_diagonal(w, 0.0)
    return (w[:, :, None] * d).sum(axis=1)
