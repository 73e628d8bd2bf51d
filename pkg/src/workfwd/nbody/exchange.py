"""Essential-tree exchange over two forwarding contexts.

Every rank sends its root node to all peers as a virtual particle. A peer
that cannot accept a received node at the nearest point of its own particle
bounding box sends a refinement request back; the owner answers with that
node's children. Rounds repeat until neither context carries any traffic.
"""
from __future__ import annotations

import numpy as np

from ..forward import ForwardingContext
from .tree import BHTree, mac_accept

PARTICLE = np.dtype([
    ("pos", "<f8", (3,)), ("vel", "<f8", (3,)), ("force", "<f8", (3,)),
    ("mass", "<f8"), ("id", "<u8"),
])

VIRTUAL_PARTICLE = np.dtype([
    ("pos", "<f8", (3,)),       # center of mass
    ("mass", "<f8"),
    ("smax", "<f8"),            # node size for the opening criterion, 0 = leaf
    ("quad", "<f8", (6,)),
    ("source_rank", "<i4"),
    ("node_id", "<i4"),
    ("parent_id", "<i4"),
])

REFINEMENT_REQ = np.dtype([("sender_rank", "<i4"), ("node_id", "<i4")])


class RefinementProtocolError(RuntimeError):
    pass


def virtual_particles(tree: BHTree, nodes, rank: int) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.zeros(len(nodes), dtype=VIRTUAL_PARTICLE)
    out["pos"] = tree.com[nodes]
    out["mass"] = tree.mass[nodes]
    out["smax"] = tree.smax[nodes]
    out["quad"] = tree.quad[nodes]
    out["source_rank"] = rank
    out["node_id"] = tree.node_id[nodes]
    out["parent_id"] = tree.parent[nodes]
    return out


def nearest_distance(points, lower, upper) -> np.ndarray:
    """Distance from each point to the closest point of the box."""
    points = np.asarray(points, dtype=np.float64)
    nearest = np.clip(points, lower, upper)
    return np.linalg.norm(points - nearest, axis=-1)


def imported_tree(vps: np.ndarray, source_rank: int) -> BHTree:
    """Rebuild the partial remote tree spanned by received virtual particles."""
    vps = np.sort(vps, order="node_id")
    ids = vps["node_id"].astype(np.int64)
    if len(np.unique(ids)) != len(ids):
        raise RefinementProtocolError(f"rank {source_rank} sent a node twice")
    index = {int(i): k for k, i in enumerate(ids)}
    kids: list[list[int]] = [[] for _ in range(len(vps))]
    for k, par in enumerate(vps["parent_id"]):
        if par >= 0:
            if int(par) not in index:
                raise RefinementProtocolError(
                    f"node {ids[k]} of rank {source_rank} arrived without its parent {par}")
            kids[index[int(par)]].append(k)
    counts = np.array([len(c) for c in kids], dtype=np.int64)
    child_ptr = np.zeros(len(vps) + 1, dtype=np.int64)
    np.cumsum(counts, out=child_ptr[1:])
    return BHTree(
        com=vps["pos"].astype(np.float64), mass=vps["mass"].astype(np.float64),
        smax=vps["smax"].astype(np.float64), quad=vps["quad"].astype(np.float64),
        child_ptr=child_ptr, children=np.array([c for k in kids for c in k], dtype=np.int64),
        particle=np.full(len(vps), -1, dtype=np.int64), node_id=ids,
        parent=vps["parent_id"].astype(np.int64), source_rank=source_rank)


def essential_tree_exchange(tree: BHTree, bounds, vctx: ForwardingContext,
                            rctx: ForwardingContext, theta: float) -> tuple[list[BHTree], int]:
    """Import the remote nodes this rank needs; collective over both contexts.

    ``bounds`` is the (lower, upper) box of the local particles, or None if
    this rank holds none. Returns the imported partial trees, one per peer
    that had particles, ordered by source rank, and the number of rounds.
    """
    comm = vctx.comm
    me, R = comm.rank, comm.size
    vview, rview = vctx.view(), rctx.view()
    received: list[np.ndarray] = []

    if tree.size and R > 1:
        root = virtual_particles(tree, [0], me)
        peers = np.array([r for r in range(R) if r != me])
        vview.emit_many(np.repeat(root, len(peers)), peers)
    v_remaining = vctx.forward()
    rounds = 1
    while True:
        incoming = vview.incoming().copy()
        if len(incoming):
            received.append(incoming)
            if bounds is not None:
                dist = nearest_distance(incoming["pos"], *bounds)
                refine = ~mac_accept(incoming["smax"], dist, theta)
                reqs = np.zeros(int(refine.sum()), dtype=REFINEMENT_REQ)
                reqs["sender_rank"] = me
                reqs["node_id"] = incoming["node_id"][refine]
                rview.emit_many(reqs, incoming["source_rank"][refine])
        r_remaining = rctx.forward()

        reqs = rview.incoming()
        if len(reqs):
            nodes = reqs["node_id"].astype(np.int64)
            if np.any((nodes < 0) | (nodes >= tree.size)):
                raise RefinementProtocolError(f"rank {me}: request for an unknown node")
            if np.any(tree.is_leaf(nodes)):
                raise RefinementProtocolError(f"rank {me}: refinement requested for a leaf")
            counts = tree.num_children(nodes)
            kids = np.concatenate([tree.children_of(n) for n in nodes])
            vview.emit_many(virtual_particles(tree, kids, me),
                            np.repeat(reqs["sender_rank"].astype(np.int64), counts))
        v_remaining = vctx.forward()
        rounds += 1
        if v_remaining == 0 and r_remaining == 0:
            break

    if not received:
        return [], rounds
    allvp = np.concatenate(received)
    trees = []
    for src in np.unique(allvp["source_rank"]):
        trees.append(imported_tree(allvp[allvp["source_rank"] == src], int(src)))
    return trees, rounds
