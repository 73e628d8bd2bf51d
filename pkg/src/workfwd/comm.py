"""Minimal collective communication: barrier, count all-to-all, byte
all-to-all-v and sum-reduce.

Two transports share one interface. ``in_process`` runs every rank as a
thread of one process and matches collectives through a shared rendezvous
table. ``socket`` runs ranks as separate processes joined by a full mesh of
TCP connections.

Socket wire format: every message is an 8-byte little-endian unsigned
length followed by that many payload bytes. The first payload byte is the
collective opcode (see :class:`Op`); a mismatch between the opcode a rank
expects and the one it receives is a :class:`ProtocolError`.
"""
from __future__ import annotations

import enum
import logging
import os
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 30_000

_LEN = struct.Struct("<Q")
_HELLO = b"WFHELLO1"


class Op(enum.IntEnum):
    BARRIER = 0
    ALLTOALL_COUNTS = 1
    ALLTOALLV = 2
    ALLREDUCE = 3


class CommError(RuntimeError):
    pass


class CommTimeout(CommError):
    pass


class ConnectionFailure(CommError):
    pass


class ProtocolError(CommError):
    pass


class CommAborted(CommError):
    """Raised in surviving ranks when another in-process rank failed."""


@dataclass
class CommConfig:
    transport: str = "in_process"
    num_ranks: int = 1
    rank: int = 0
    endpoints: list[str] = field(default_factory=list)
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    def __post_init__(self):
        if self.transport not in ("in_process", "socket"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.num_ranks < 1:
            raise ValueError("num_ranks must be >= 1")
        if not 0 <= self.rank < self.num_ranks:
            raise ValueError(f"rank {self.rank} outside [0, {self.num_ranks})")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.transport == "socket" and len(self.endpoints) != self.num_ranks:
            raise ValueError(
                f"socket transport needs {self.num_ranks} endpoints, "
                f"got {len(self.endpoints)}")

    @property
    def timeout(self) -> float:
        return self.timeout_ms / 1000.0


def _as_counts(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.shape != (n,):
        raise ValueError(f"{what} must have exactly {n} entries, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError(f"{what} must be non-negative")
    return arr


def _check_regions(counts: np.ndarray, offsets: np.ndarray, buflen: int, what: str):
    ends = offsets + counts
    if np.any(ends > buflen):
        r = int(np.argmax(ends > buflen))
        raise ValueError(
            f"{what} region for peer {r} [{offsets[r]}, {ends[r]}) exceeds buffer of {buflen} bytes")
    nonempty = np.flatnonzero(counts)
    if len(nonempty) > 1:
        order = nonempty[np.argsort(offsets[nonempty], kind="stable")]
        if np.any(offsets[order[1:]] < ends[order[:-1]]):
            raise ValueError(f"{what} regions overlap")


class Communicator:
    """Rank identity plus the four collectives used by the forwarding
    pipeline. Every rank must call the same collectives in the same order.
    """

    def __init__(self, config: CommConfig):
        self.config = config
        # per-round statistics appended by forwarding contexts on this comm
        self.forward_log: list = []

    @property
    def rank(self) -> int:
        return self.config.rank

    @property
    def size(self) -> int:
        return self.config.num_ranks

    def _exchange(self, op: Op, outgoing: list) -> list:
        raise NotImplementedError

    def barrier(self) -> None:
        self._exchange(Op.BARRIER, [b""] * self.size)

    def alltoall_counts(self, send_counts) -> np.ndarray:
        """Entry ``r`` of the result is what rank ``r`` put at our index."""
        counts = np.asarray(send_counts, dtype=np.uint64)
        if counts.shape != (self.size,):
            raise ValueError(
                f"send_counts must have {self.size} entries, got shape {counts.shape}")
        outgoing = [counts[r:r + 1].astype("<u8").tobytes() for r in range(self.size)]
        incoming = self._exchange(Op.ALLTOALL_COUNTS, outgoing)
        return np.array([_LEN.unpack(b)[0] for b in incoming], dtype=np.uint64)

    def alltoallv_bytes(self, send_buf, send_counts, send_offsets,
                        recv_buf, recv_counts, recv_offsets) -> None:
        n = self.size
        send = memoryview(send_buf).cast("B")
        recv = memoryview(recv_buf).cast("B")
        if recv.readonly:
            raise ValueError("recv_buf must be writable")
        sc = _as_counts(send_counts, n, "send_counts")
        so = _as_counts(send_offsets, n, "send_offsets")
        rc = _as_counts(recv_counts, n, "recv_counts")
        ro = _as_counts(recv_offsets, n, "recv_offsets")
        _check_regions(sc, so, len(send), "send")
        _check_regions(rc, ro, len(recv), "recv")

        outgoing = [send[so[r]:so[r] + sc[r]] for r in range(n)]
        incoming = self._exchange(Op.ALLTOALLV, outgoing)
        for r, chunk in enumerate(incoming):
            if len(chunk) != rc[r]:
                raise ProtocolError(
                    f"rank {self.rank}: expected {rc[r]} bytes from rank {r}, got {len(chunk)}")
            if rc[r]:
                recv[ro[r]:ro[r] + rc[r]] = chunk

    def allreduce_sum(self, local: int) -> int:
        value = int(local)
        if not 0 <= value < 2**64:
            raise ValueError("allreduce_sum operates on 64-bit unsigned values")
        payload = _LEN.pack(value)
        incoming = self._exchange(Op.ALLREDUCE, [payload] * self.size)
        return sum(_LEN.unpack(b)[0] for b in incoming) % 2**64

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# in-process transport


class _Slot:
    __slots__ = ("ops", "data", "arrived", "read")

    def __init__(self, n):
        self.ops = [None] * n
        self.data = [None] * n
        self.arrived = 0
        self.read = 0


class InProcessWorld:
    """Shared rendezvous state for ``num_ranks`` in-process communicators.

    Collective number ``k`` of every rank meets in slot ``k``; the slot is
    dropped once every rank has read its share, so calls never interfere
    across generations.
    """

    def __init__(self, num_ranks: int):
        if num_ranks < 1:
            raise ValueError("num_ranks must be >= 1")
        self.num_ranks = num_ranks
        self._cond = threading.Condition()
        self._slots: dict[int, _Slot] = {}
        self._attached: set[int] = set()
        self._aborted: tuple[int, str] | None = None

    def attach(self, rank: int):
        with self._cond:
            if rank in self._attached:
                raise ConnectionFailure(f"duplicate rank {rank} in in-process world")
            self._attached.add(rank)

    def detach(self, rank: int):
        with self._cond:
            self._attached.discard(rank)

    def abort(self, rank: int, reason: str = ""):
        with self._cond:
            if self._aborted is None:
                self._aborted = (rank, reason)
            self._cond.notify_all()

    def exchange(self, rank: int, seq: int, op: Op, outgoing: list, timeout: float) -> list:
        n = self.num_ranks
        # copy now: the caller may reuse its buffers as soon as we return
        payload = [bytes(b) if isinstance(b, memoryview) else b for b in outgoing]
        deadline = time.monotonic() + timeout
        with self._cond:
            slot = self._slots.get(seq)
            if slot is None:
                slot = self._slots[seq] = _Slot(n)
            slot.ops[rank] = op
            slot.data[rank] = payload
            slot.arrived += 1
            if slot.arrived == n:
                self._cond.notify_all()
            while slot.arrived < n:
                if self._aborted is not None:
                    who, why = self._aborted
                    raise CommAborted(f"rank {who} aborted the run: {why}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = [r for r in range(n) if slot.ops[r] is None]
                    raise CommTimeout(
                        f"rank {rank}: {op.name} #{seq} timed out waiting for ranks {missing}")
                self._cond.wait(remaining)
            incoming = [slot.data[src][rank] for src in range(n)]
            ops = set(slot.ops)
            slot.read += 1
            if slot.read == n:
                del self._slots[seq]
        if len(ops) != 1:
            raise ProtocolError(
                f"rank {rank}: collective #{seq} mismatch, ranks called "
                f"{[o.name for o in slot.ops]}")
        return incoming


class InProcessCommunicator(Communicator):
    def __init__(self, config: CommConfig, world: InProcessWorld):
        super().__init__(config)
        if world.num_ranks != config.num_ranks:
            raise ValueError(
                f"world has {world.num_ranks} ranks, config says {config.num_ranks}")
        self.world = world
        self._seq = 0
        world.attach(config.rank)

    def _exchange(self, op, outgoing):
        seq = self._seq
        self._seq += 1
        return self.world.exchange(self.rank, seq, op, outgoing, self.config.timeout)

    def close(self):
        self.world.detach(self.rank)


# --------------------------------------------------------------------------
# socket transport


def _parse_endpoint(ep: str) -> tuple[str, int]:
    host, _, port = ep.rpartition(":")
    if not host or not port:
        raise ValueError(f"bad endpoint {ep!r}, expected host:port")
    return host, int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise CommError("peer closed the connection")
        got += k
    return buf


def _send_frame(sock: socket.socket, op: int, data) -> None:
    data = memoryview(data).cast("B")
    sock.sendall(_LEN.pack(len(data) + 1) + bytes((op,)))
    if len(data):
        sock.sendall(data)


def _recv_frame(sock: socket.socket) -> tuple[int, bytearray]:
    (length,) = _LEN.unpack(_recv_exact(sock, 8))
    if length < 1:
        raise ProtocolError("empty frame")
    payload = _recv_exact(sock, length)
    return payload[0], payload[1:]


class SocketCommunicator(Communicator):
    """Full-mesh TCP transport. Rank ``r`` listens on ``endpoints[r]``,
    accepts connections from higher ranks and dials lower ranks.
    """

    def __init__(self, config: CommConfig):
        super().__init__(config)
        self._peers: dict[int, socket.socket] = {}
        self._pool: ThreadPoolExecutor | None = None
        if self.size > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.size - 1,
                                            thread_name_prefix=f"wf-send-{self.rank}")
        try:
            self._connect()
        except BaseException:
            self.close()
            raise

    def _connect(self):
        cfg = self.config
        deadline = time.monotonic() + cfg.timeout
        expected_accepts = set(range(cfg.rank + 1, cfg.num_ranks))
        listener = None
        if expected_accepts:
            host, port = _parse_endpoint(cfg.endpoints[cfg.rank])
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((host, port))
            listener.listen(cfg.num_ranks)
        try:
            for peer in range(cfg.rank):
                self._peers[peer] = self._dial(peer, deadline)
            while expected_accepts:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ConnectionFailure(
                        f"rank {cfg.rank}: ranks {sorted(expected_accepts)} never connected "
                        f"within {cfg.timeout_ms} ms")
                listener.settimeout(remaining)
                try:
                    conn, _ = listener.accept()
                except socket.timeout:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn.settimeout(max(deadline - time.monotonic(), 0.001))
                try:
                    op, data = _recv_frame(conn)
                except (OSError, CommError) as exc:
                    conn.close()
                    raise ConnectionFailure(f"rank {cfg.rank}: bad handshake: {exc}") from exc
                if op != Op.BARRIER or data[:8] != _HELLO or len(data) != 16:
                    conn.close()
                    raise ConnectionFailure(f"rank {cfg.rank}: malformed handshake")
                (peer,) = _LEN.unpack(data[8:])
                if peer in self._peers:
                    conn.close()
                    raise ConnectionFailure(f"rank {cfg.rank}: duplicate rank {peer}")
                if peer not in expected_accepts:
                    conn.close()
                    raise ConnectionFailure(
                        f"rank {cfg.rank}: unexpected connection claiming rank {peer}")
                self._peers[peer] = conn
                expected_accepts.discard(peer)
        finally:
            if listener is not None:
                listener.close()
        for conn in self._peers.values():
            conn.settimeout(cfg.timeout)
        # creation doubles as a barrier
        self.barrier()

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        host, port = _parse_endpoint(self.config.endpoints[peer])
        last_error = None
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ConnectionFailure(
                    f"rank {self.rank}: could not reach rank {peer} at {host}:{port} "
                    f"within {self.config.timeout_ms} ms ({last_error})")
            try:
                conn = socket.create_connection((host, port), timeout=min(remaining, 1.0))
            except OSError as exc:
                last_error = exc
                time.sleep(min(0.05, max(remaining, 0)))
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(max(remaining, 0.001))
            _send_frame(conn, Op.BARRIER, _HELLO + _LEN.pack(self.rank))
            return conn

    def _exchange(self, op, outgoing):
        me = self.rank
        sends = [self._pool.submit(_send_frame, self._peers[p], op, outgoing[p])
                 for p in sorted(self._peers)]
        incoming: list = [None] * self.size
        incoming[me] = bytes(outgoing[me])
        for p in sorted(self._peers):
            try:
                got_op, data = _recv_frame(self._peers[p])
            except socket.timeout as exc:
                raise CommTimeout(
                    f"rank {me}: {op.name} timed out waiting for rank {p}") from exc
            except OSError as exc:
                raise CommError(f"rank {me}: receive from rank {p} failed: {exc}") from exc
            if got_op != op:
                raise ProtocolError(
                    f"rank {me}: expected {op.name} from rank {p}, got opcode {got_op}")
            incoming[p] = data
        for fut in sends:
            exc = fut.exception()
            if isinstance(exc, socket.timeout):
                raise CommTimeout(f"rank {me}: send timed out") from exc
            if exc is not None:
                raise CommError(f"rank {me}: send failed: {exc}") from exc
        return incoming

    def close(self):
        for conn in self._peers.values():
            try:
                conn.close()
            except OSError:
                pass
        self._peers.clear()
        if self._pool is not None:
            self._pool.shutdown(wait=False)
            self._pool = None


def create_communicator(config: CommConfig, world: InProcessWorld | None = None) -> Communicator:
    """Build a communicator for ``config.rank``.

    In-process worlds with more than one rank need the shared ``world``
    object handed to every rank (the harness does this). Creation returns
    only after every rank has joined.
    """
    if config.transport == "socket":
        return SocketCommunicator(config)
    if world is None:
        if config.num_ranks != 1:
            raise ValueError("in-process communicators with >1 rank need a shared InProcessWorld")
        world = InProcessWorld(1)
    comm = InProcessCommunicator(config, world)
    try:
        comm.barrier()
    except BaseException:
        comm.close()
        raise
    return comm


def communicator_from_env(timeout_ms: int | None = None) -> Communicator:
    """Socket (or single-rank) communicator from WF_RANK, WF_WORLD,
    WF_ENDPOINTS and WF_TRANSPORT."""
    rank = int(os.environ.get("WF_RANK", "0"))
    world = int(os.environ.get("WF_WORLD", "1"))
    transport = os.environ.get("WF_TRANSPORT", "socket" if world > 1 else "in_process")
    endpoints = [e for e in os.environ.get("WF_ENDPOINTS", "").split(",") if e]
    cfg = CommConfig(transport=transport, num_ranks=world, rank=rank, endpoints=endpoints,
                     timeout_ms=timeout_ms or DEFAULT_TIMEOUT_MS)
    return create_communicator(cfg)


def free_endpoints(n: int, host: str = "127.0.0.1") -> list[str]:
    """Reserve ``n`` currently-free TCP ports on ``host``."""
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind((host, 0))
            socks.append(s)
        return [f"{host}:{s.getsockname()[1]}" for s in socks]
    finally:
        for s in socks:
            s.close()
