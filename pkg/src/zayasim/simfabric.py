"""Deterministic in-process multi-rank fabric.

Each rank runs a generator-based program. ``send`` is buffered and never
blocks; ``recv`` is awaited with ``yield from comm.recv(...)`` and suspends the
rank until a matching message is queued. A cooperative round-robin scheduler
drives all ranks on one thread, so runs are reproducible message for message.

Collectives are ring algorithms built on the same point-to-point layer.
"""

from __future__ import annotations

import inspect
import logging
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import ShapeError
from .perfplan import xgmi_bw

log = logging.getLogger(__name__)

COLLECTIVES = ("allreduce", "allgather", "reducescatter", "alltoall", "broadcast")


class DeadlockError(RuntimeError):
    def __init__(self, waits: Dict[int, Tuple[int, Any]], cycle: List[int]):
        self.waits = waits
        self.cycle = cycle
        desc = ", ".join(f"rank {r} waits on rank {src} (tag {tag!r})" for r, (src, tag) in sorted(waits.items()))
        super().__init__(f"deadlock: cycle {' -> '.join(map(str, cycle))}; {desc}")


@dataclass(frozen=True)
class Event:
    seq: int
    op: str
    rank: int
    peer: int
    tag: Any
    nbytes: int
    digest: int


def payload_nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return int(obj.nbytes)
    if isinstance(obj, (list, tuple)):
        return sum(payload_nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(payload_nbytes(o) for o in obj.values())
    if isinstance(obj, (bytes, bytearray)):
        return len(obj)
    if isinstance(obj, str):
        return len(obj.encode())
    if obj is None:
        return 0
    return 8


def _digest(obj) -> int:
    if isinstance(obj, np.ndarray):
        return zlib.crc32(np.ascontiguousarray(obj).tobytes())
    if isinstance(obj, (list, tuple)):
        d = 0
        for o in obj:
            d = zlib.crc32(d.to_bytes(4, "little"), _digest(o))
        return d
    return zlib.crc32(repr(obj).encode())


def _copy(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, list):
        return [_copy(o) for o in obj]
    if isinstance(obj, tuple):
        return tuple(_copy(o) for o in obj)
    return obj


# --------------------------------------------------------------------------
# Topology and cost model
# --------------------------------------------------------------------------

@dataclass
class FabricTopology:
    ranks_per_node: int = 8
    nodes: int = 1
    link_bw_intra: float = 64e9
    bw_max_intra: float = 450e9
    nic_bw: float = 400e9 / 8
    mode: str = "xgmi"
    alpha: Dict[str, float] = field(default_factory=lambda: {"intra": 5e-6, "inter": 15e-6})
    # optional measured asymptotes keyed "kind:scope", e.g. "allreduce:inter"
    beta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("xgmi", "switched"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "xgmi" and not 1 <= self.ranks_per_node <= 8:
            raise ValueError("xgmi nodes hold 1..8 ranks")
        if min(self.link_bw_intra, self.bw_max_intra, self.nic_bw) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.nodes < 1:
            raise ValueError("need at least one node")

    @property
    def world_size(self) -> int:
        return self.ranks_per_node * self.nodes

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    def rail_of(self, rank: int) -> int:
        return rank % self.ranks_per_node


def bus_factor(kind: str, n: int) -> float:
    if kind == "allreduce":
        return 2.0 * (n - 1) / n
    if kind in ("allgather", "reducescatter", "alltoall"):
        return (n - 1) / n
    if kind == "broadcast":
        return 1.0 if n > 1 else 0.0
    raise ValueError(f"unknown collective kind {kind!r}")


@dataclass
class Prediction:
    seconds: float
    algbw: float
    busbw: float
    beta_eff: float
    scope: str


def effective_beta(topo: FabricTopology, kind: str, n_ranks: int) -> Tuple[float, str]:
    if n_ranks <= topo.ranks_per_node:
        scope = "intra"
        if topo.mode == "xgmi":
            ceiling = xgmi_bw(n_ranks, topo.link_bw_intra)
        else:
            ceiling = topo.bw_max_intra
    else:
        scope = "inter"
        ceiling = topo.nic_bw
    measured = topo.beta.get(f"{kind}:{scope}")
    return (min(measured, ceiling) if measured else ceiling), scope


def predict_time(topo: FabricTopology, kind: str, msg_bytes: float, n_ranks: int,
                 cross_rail: bool = False) -> Prediction:
    """Alpha-beta estimate of one collective, plus algorithmic and bus bandwidth.

    Bytes on the wire are ``msg_bytes`` times the ring byte multiplier, pushed
    through the effective bandwidth (the xGMI ceiling intra-node, NIC
    bandwidth inter-node). Cross-rail traffic pays one extra latency.
    """
    if msg_bytes < 0:
        raise ValueError("message size must be non-negative")
    if n_ranks < 1:
        raise ValueError("need at least one rank")
    factor = bus_factor(kind, n_ranks)
    beta, scope = effective_beta(topo, kind, n_ranks)
    alpha = topo.alpha[scope] + (topo.alpha[scope] if cross_rail and scope == "inter" else 0.0)
    seconds = alpha + (msg_bytes * factor / beta if factor > 0 else 0.0)
    algbw = msg_bytes / seconds if seconds > 0 else 0.0
    return Prediction(seconds, algbw, algbw * factor, beta, scope)


def predict_p2p(topo: FabricTopology, src: int, dst: int, nbytes: float) -> float:
    if topo.node_of(src) == topo.node_of(dst):
        return topo.alpha["intra"] + nbytes / topo.link_bw_intra
    extra = topo.alpha["inter"] if topo.rail_of(src) != topo.rail_of(dst) else 0.0
    return topo.alpha["inter"] + extra + nbytes / topo.nic_bw


# --------------------------------------------------------------------------
# Ranks and scheduler
# --------------------------------------------------------------------------

class Comm:
    """A rank's handle on the fabric. Generator methods need ``yield from``."""

    def __init__(self, fabric: "Fabric", rank: int):
        self.fabric = fabric
        self.rank = rank
        self.size = fabric.world_size
        self.store: Dict[str, Any] = {}
        self._coll_seq: Dict[Tuple[int, ...], int] = defaultdict(int)

    # -- point to point ----------------------------------------------------
    def send(self, dst: int, payload, tag: Any = 0) -> None:
        self.fabric._deliver(self.rank, dst, tag, payload)

    def recv(self, src: int, tag: Any = 0):
        fab = self.fabric
        key = (src, tag)
        while not fab._inbox[self.rank][key]:
            fab._waiting[self.rank] = key
            yield key
        fab._waiting.pop(self.rank, None)
        payload = fab._inbox[self.rank][key].popleft()
        fab._record("recv", self.rank, src, tag, payload)
        return payload

    def sendrecv(self, peer: int, payload, tag: Any = 0):
        """Exchange with ``peer``; the lower rank sends first, the higher receives first."""
        if self.rank < peer:
            self.send(peer, payload, tag)
            got = yield from self.recv(peer, tag)
        else:
            got = yield from self.recv(peer, tag)
            self.send(peer, payload, tag)
        return got

    # -- collectives ---------------------------------------------------------
    def _group(self, group: Optional[Sequence[int]]) -> Tuple[Tuple[int, ...], int]:
        g = tuple(range(self.size)) if group is None else tuple(group)
        if not g:
            raise ValueError("empty communicator group")
        if self.rank not in g:
            raise ValueError(f"rank {self.rank} is not in group {g}")
        return g, g.index(self.rank)

    def _tag(self, g: Tuple[int, ...], kind: str):
        seq = self._coll_seq[g]
        self._coll_seq[g] += 1
        return (kind, seq)

    def reducescatter(self, x, group=None):
        """Ring reduce-scatter of the flattened payload; returns this rank's summed chunk."""
        g, i = self._group(group)
        n = len(g)
        tag = self._tag(g, "reducescatter")
        flat = np.asarray(x, dtype=np.float64).reshape(-1)
        acc = [c.copy() for c in np.array_split(flat, n)]
        nxt, prv = g[(i + 1) % n], g[(i - 1) % n]
        for s in range(n - 1):
            self.send(nxt, acc[(i - s - 1) % n], (tag, s))
            got = yield from self.recv(prv, (tag, s))
            c = (i - s - 2) % n
            if got.shape != acc[c].shape:
                raise ShapeError(f"reducescatter chunk mismatch {got.shape} vs {acc[c].shape}")
            acc[c] = got + acc[c]
        return acc[i]

    def allgather_list(self, piece, group=None) -> List[Any]:
        g, i = self._group(group)
        n = len(g)
        tag = self._tag(g, "allgather")
        pieces: List[Any] = [None] * n
        pieces[i] = _copy(piece)
        nxt, prv = g[(i + 1) % n], g[(i - 1) % n]
        for s in range(n - 1):
            self.send(nxt, pieces[(i - s) % n], (tag, s))
            pieces[(i - s - 1) % n] = yield from self.recv(prv, (tag, s))
        return pieces

    def allgather(self, piece, group=None) -> np.ndarray:
        pieces = yield from self.allgather_list(np.atleast_1d(np.asarray(piece)), group)
        return np.concatenate([np.asarray(p).reshape(-1) for p in pieces])

    def allreduce(self, x, group=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mine = yield from self.reducescatter(x, group)
        full = yield from self.allgather(mine, group)
        return full.reshape(x.shape)

    def alltoall(self, chunks: Sequence[Any], group=None) -> List[Any]:
        g, i = self._group(group)
        n = len(g)
        if len(chunks) != n:
            raise ShapeError(f"alltoall needs {n} chunks, got {len(chunks)}")
        tag = self._tag(g, "alltoall")
        out: List[Any] = [None] * n
        out[i] = _copy(chunks[i])
        for s in range(1, n):
            self.send(g[(i + s) % n], chunks[(i + s) % n], (tag, s))
            out[(i - s) % n] = yield from self.recv(g[(i - s) % n], (tag, s))
        return out

    def broadcast(self, x, root: int = 0, group=None):
        """Chain broadcast from ``root`` (a global rank) around the group ring."""
        g, i = self._group(group)
        n = len(g)
        tag = self._tag(g, "broadcast")
        r = g.index(root)
        pos = (i - r) % n
        val = _copy(x) if pos == 0 else (yield from self.recv(g[(i - 1) % n], tag))
        if pos < n - 1:
            self.send(g[(i + 1) % n], val, tag)
        return val

    def barrier(self, group=None):
        yield from self.allgather_list(None, group)

    def collective(self, kind: str, payload, group=None, root: int = 0):
        if kind == "allreduce":
            return (yield from self.allreduce(payload, group))
        if kind == "allgather":
            return (yield from self.allgather(payload, group))
        if kind == "reducescatter":
            return (yield from self.reducescatter(payload, group))
        if kind == "alltoall":
            return (yield from self.alltoall(payload, group))
        if kind == "broadcast":
            return (yield from self.broadcast(payload, root, group))
        raise ValueError(f"unknown collective kind {kind!r}")


class Fabric:
    """Owns every rank's mailbox and the message transcript."""

    def __init__(self, world_size: int, topology: Optional[FabricTopology] = None):
        if world_size < 1:
            raise ValueError("world size must be >= 1")
        self.world_size = world_size
        self.topology = topology
        self.comms = [Comm(self, r) for r in range(world_size)]
        self.transcript: List[Event] = []
        self._inbox: List[Dict[Tuple[int, Any], deque]] = [defaultdict(deque) for _ in range(world_size)]
        self._waiting: Dict[int, Tuple[int, Any]] = {}
        self._seq = 0

    def _record(self, op: str, rank: int, peer: int, tag, payload) -> None:
        self.transcript.append(Event(self._seq, op, rank, peer, tag, payload_nbytes(payload), _digest(payload)))
        self._seq += 1

    def _deliver(self, src: int, dst: int, tag, payload) -> None:
        if not 0 <= dst < self.world_size:
            raise ValueError(f"no such rank {dst}")
        if dst == src:
            raise ValueError("send to self")
        self._record("send", src, dst, tag, payload)
        self._inbox[dst][(src, tag)].append(_copy(payload))

    def sends(self) -> List[Event]:
        return [e for e in self.transcript if e.op == "send"]

    def bytes_sent(self) -> int:
        return sum(e.nbytes for e in self.sends())

    def predicted_comm_time(self) -> float:
        """Serialized alpha-beta cost of every send in the transcript."""
        topo = self.topology or FabricTopology(ranks_per_node=min(self.world_size, 8),
                                               nodes=-(-self.world_size // 8))
        return sum(predict_p2p(topo, e.rank, e.peer, e.nbytes) for e in self.sends())

    def run(self, program: Callable[..., Any], *args, **kwargs) -> List[Any]:
        """Run ``program(comm, *args, **kwargs)`` on every rank to completion.

        ``program`` may be a generator function (it can then block on
        ``recv``) or a plain function. Per-rank arguments can be supplied by
        passing a callable ``per_rank=lambda r: (...)`` returning a tuple of
        extra positional arguments.
        """
        per_rank = kwargs.pop("per_rank", None)
        results: List[Any] = [None] * self.world_size
        live: Dict[int, Any] = {}
        for r, comm in enumerate(self.comms):
            extra = tuple(per_rank(r)) if per_rank else ()
            out = program(comm, *extra, *args, **kwargs)
            if inspect.isgenerator(out):
                live[r] = out
            else:
                results[r] = out
        while live:
            progressed = False
            for r in sorted(live):
                key = self._waiting.get(r)
                if key is not None and not self._inbox[r][key]:
                    continue
                try:
                    next(live[r])
                except StopIteration as stop:
                    results[r] = stop.value
                    del live[r]
                progressed = True
            if not progressed:
                waits = {r: self._waiting[r] for r in live}
                raise DeadlockError(waits, _find_cycle({r: w[0] for r, w in waits.items()}))
        return results


def _find_cycle(edges: Dict[int, int]) -> List[int]:
    for start in sorted(edges):
        path, seen = [], {}
        node = start
        while node in edges and node not in seen:
            seen[node] = len(path)
            path.append(node)
            node = edges[node]
        if node in seen:
            cyc = path[seen[node]:]
            return cyc + [cyc[0]]
    # a rank is waiting on a finished rank: report the chain
    start = min(edges)
    chain = [start]
    while chain[-1] in edges and edges[chain[-1]] not in chain:
        chain.append(edges[chain[-1]])
    return chain


def reference_collective(kind: str, payloads: Sequence[Any], root: int = 0) -> List[Any]:
    """Central, non-distributed definition of each collective (used for checking)."""
    n = len(payloads)
    if n == 0:
        raise ValueError("empty group")
    if kind == "allreduce":
        total = np.sum(np.stack([np.asarray(p, dtype=np.float64) for p in payloads]), axis=0)
        return [total.copy() for _ in range(n)]
    if kind == "allgather":
        cat = np.concatenate([np.atleast_1d(np.asarray(p)).reshape(-1) for p in payloads])
        return [cat.copy() for _ in range(n)]
    if kind == "reducescatter":
        total = np.sum(np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in payloads]), axis=0)
        return [c.copy() for c in np.array_split(total, n)]
    if kind == "alltoall":
        return [[payloads[src][dst] for src in range(n)] for dst in range(n)]
    if kind == "broadcast":
        return [np.array(payloads[root], copy=True) for _ in range(n)]
    raise ValueError(f"unknown collective kind {kind!r}")


def run_collective(kind: str, payloads: Sequence[Any], root: int = 0,
                   topology: Optional[FabricTopology] = None) -> Tuple[List[Any], Fabric]:
    """Run one collective over a fresh fabric with one payload per rank."""
    fab = Fabric(len(payloads), topology)

    def prog(comm):
        return (yield from comm.collective(kind, payloads[comm.rank], root=root))

    return fab.run(prog), fab
