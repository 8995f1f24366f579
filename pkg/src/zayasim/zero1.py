"""ZeRO-1 optimizer-state sharding and the distributed Muon step.

Parameters are flattened in declaration order, concatenated, padded and cut
into equal contiguous chunks, one per data-parallel rank. A parameter whose
flat range crosses a chunk boundary is *split*; Muon needs it whole, so the
two owners swap their halves point-to-point (``sendrecv``) instead of every
rank materializing the full parameter vector (``allgather``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .muon import (AdamWConfig, AdamWState, MuonConfig, MuonState, adamw_step, momentum_pass,
                   newton_schulz, weight_update)
from .simfabric import Comm

STRATEGIES = ("sendrecv", "allgather")


class UnsupportedSpanError(ValueError):
    """A Muon parameter spans more than two data-parallel ranks."""


@dataclass(frozen=True)
class ParamSpec:
    pid: int
    name: str
    shape: Tuple[int, ...]
    offset: int
    kind: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ShardLayout:
    params: Tuple[ParamSpec, ...]
    dp_degree: int
    alignment: int
    total: int
    padded_total: int

    @property
    def shard_size(self) -> int:
        return self.padded_total // self.dp_degree

    @property
    def ranges(self) -> List[Tuple[int, int]]:
        return [self.rank_range(r) for r in range(self.dp_degree)]

    def rank_range(self, rank: int) -> Tuple[int, int]:
        return rank * self.shard_size, (rank + 1) * self.shard_size

    def by_name(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def owners(self, pid: int) -> List[int]:
        p = self.params[pid]
        if p.size == 0:
            return []
        first = p.offset // self.shard_size
        last = (p.end - 1) // self.shard_size
        return list(range(first, last + 1))

    def is_split(self, pid: int) -> bool:
        return len(self.owners(pid)) > 1

    def local_slices(self, rank: int) -> List[Tuple[ParamSpec, int, int]]:
        """``(param, lo, hi)`` global flat ranges of every parameter piece on ``rank``."""
        start, end = self.rank_range(rank)
        out = []
        for p in self.params:
            lo, hi = max(p.offset, start), min(p.end, end)
            if lo < hi:
                out.append((p, lo, hi))
        return out

    def max_muon_span(self) -> int:
        spans = [len(self.owners(p.pid)) for p in self.params if p.kind == "muon"]
        return max(spans, default=0)

    def with_dp(self, dp_degree: int) -> "ShardLayout":
        return build_shards([(p.name, p.shape, p.kind) for p in self.params], dp_degree, self.alignment)


ParamDecl = Union[Tuple[int, ...], Tuple[str, Tuple[int, ...]], Tuple[str, Tuple[int, ...], str]]


def _normalize_decls(param_shapes) -> List[Tuple[str, Tuple[int, ...], str]]:
    if isinstance(param_shapes, Mapping):
        param_shapes = list(param_shapes.items())
    out = []
    for i, decl in enumerate(param_shapes):
        if isinstance(decl, tuple) and decl and isinstance(decl[0], str):
            name, shape = decl[0], tuple(int(d) for d in decl[1])
            kind = decl[2] if len(decl) > 2 else None
        else:
            name, shape, kind = f"p{i}", tuple(int(d) for d in np.atleast_1d(decl)), None
        if kind is None:
            kind = "muon" if len(shape) == 2 else "adamw"
        if kind not in ("muon", "adamw"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        out.append((name, shape, kind))
    return out


def build_shards(param_shapes, dp_degree: int, alignment: int = 64) -> ShardLayout:
    """Contiguous-chunk ZeRO-1 layout.

    The flat vector is padded up to a multiple of ``dp_degree * alignment``,
    so every shard has the same size and that size is a multiple of
    ``alignment``. ``param_shapes`` is either a name->shape map or a sequence
    whose items are bare shapes or ``(name, shape[, kind])`` tuples.
    """
    if dp_degree < 1 or alignment < 1:
        raise ValueError("dp_degree and alignment must be >= 1")
    specs, offset = [], 0
    for pid, (name, shape, kind) in enumerate(_normalize_decls(param_shapes)):
        spec = ParamSpec(pid, name, shape, offset, kind)
        specs.append(spec)
        offset += spec.size
    granule = dp_degree * alignment
    padded = max(granule, -(-offset // granule) * granule)
    return ShardLayout(tuple(specs), dp_degree, alignment, offset, padded)


# --------------------------------------------------------------------------
# Flat vectors
# --------------------------------------------------------------------------

def flatten_params(layout: ShardLayout, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    flat = np.zeros(layout.padded_total)
    for p in layout.params:
        flat[p.offset:p.end] = np.asarray(tensors[p.name], dtype=np.float64).reshape(-1)
    return flat


def unflatten_params(layout: ShardLayout, flat: np.ndarray) -> Dict[str, np.ndarray]:
    return {p.name: np.array(flat[p.offset:p.end]).reshape(p.shape) for p in layout.params}


@dataclass
class RankShard:
    """One rank's slice of the optimizer state (all buffers are shard-sized)."""

    rank: int
    layout: ShardLayout
    master: np.ndarray
    momentum: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0

    @classmethod
    def from_weights(cls, layout: ShardLayout, rank: int, flat_weights: np.ndarray) -> "RankShard":
        start, end = layout.rank_range(rank)
        n = layout.shard_size
        return cls(rank, layout, np.array(flat_weights[start:end], dtype=np.float64),
                   np.zeros(n), np.zeros(n), np.zeros(n), 0)

    def local(self, buf: np.ndarray, lo: int, hi: int) -> np.ndarray:
        start = self.rank * self.layout.shard_size
        return buf[lo - start:hi - start]


def logical_state(layout: ShardLayout, shards: Sequence[RankShard]) -> Dict[str, np.ndarray]:
    """Unpad: concatenate rank buffers and drop the padding tail."""
    shards = sorted(shards, key=lambda s: s.rank)
    if [s.rank for s in shards] != list(range(layout.dp_degree)):
        raise ValueError("need exactly one shard per rank")
    out = {}
    for key in ("master", "momentum", "m1", "m2"):
        out[key] = np.concatenate([getattr(s, key) for s in shards])[:layout.total]
    return out


def shards_from_logical(layout: ShardLayout, state: Mapping[str, np.ndarray], step: int) -> List[RankShard]:
    """Repad and remap a logical state onto ``layout``. Padding is zero-filled."""
    padded = {}
    for key in ("master", "momentum", "m1", "m2"):
        v = np.zeros(layout.padded_total)
        v[:layout.total] = state[key]
        padded[key] = v
    shards = []
    for r in range(layout.dp_degree):
        a, b = layout.rank_range(r)
        shards.append(RankShard(r, layout, *(padded[k][a:b].copy() for k in ("master", "momentum", "m1", "m2")), step))
    return shards


def reshard(layout: ShardLayout, shards: Sequence[RankShard], new_dp: int) -> Tuple[ShardLayout, List[RankShard]]:
    """Unpad-remap-repad the optimizer state for a different data-parallel degree."""
    new_layout = layout.with_dp(new_dp)
    steps = {s.step for s in shards}
    if len(steps) != 1:
        raise ValueError(f"ranks disagree on the step count: {sorted(steps)}")
    return new_layout, shards_from_logical(new_layout, logical_state(layout, shards), steps.pop())


# --------------------------------------------------------------------------
# Parameter reconstruction and the distributed step
# --------------------------------------------------------------------------

def reconstruct_param(comm: Comm, layout: ShardLayout, local_buf: np.ndarray, pid: int):
    """Rebuild parameter ``pid`` as a 2-D matrix on ``comm.rank`` (generator).

    A wholly-owned parameter is reshaped without communication. A split one
    is completed by exchanging the local portion with the single neighbouring
    owner; the lower rank sends first.
    """
    p = layout.params[pid]
    owners = layout.owners(pid)
    rank = comm.rank
    if rank not in owners:
        raise ValueError(f"rank {rank} holds no part of parameter {p.name}")
    if len(owners) > 2:
        raise UnsupportedSpanError(
            f"parameter {p.name} spans ranks {owners}; SendRecv reconstruction supports at most two")
    start, end = layout.rank_range(rank)
    lo, hi = max(p.offset, start), min(p.end, end)
    mine = local_buf[lo - start:hi - start]
    if len(owners) == 1:
        return mine.reshape(p.shape).copy(), 0
    neighbor = rank - 1 if p.offset < start else rank + 1
    theirs = yield from comm.sendrecv(neighbor, mine.copy(), tag=("param", pid))
    full = np.concatenate([theirs, mine] if neighbor < rank else [mine, theirs])
    return full.reshape(p.shape), int(theirs.size)


@dataclass
class StepResult:
    weights: Dict[str, np.ndarray]
    transient_elements: int
    loss: Optional[float] = None


def distributed_muon_step(comm: Comm, shard: RankShard, grads_flat: np.ndarray, cfg: MuonConfig,
                          adam_cfg: Optional[AdamWConfig] = None, strategy: str = "sendrecv",
                          fallback: bool = False):
    """One ZeRO-1 optimizer step on ``comm.rank`` (generator).

    ``grads_flat`` is the full, already data-parallel-averaged gradient in the
    padded flat layout. Muon parameters are rebuilt whole (``strategy``)
    and orthogonalized; only the local slice of the update is applied.
    AdamW parameters update elementwise on the shard. The updated master
    shards are all-gathered into working weights at the end.

    ``fallback`` lets ``sendrecv`` handle parameters spanning more than two
    ranks with a per-parameter all-gather instead of raising.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    layout = shard.layout
    adam_cfg = adam_cfg or AdamWConfig()
    if strategy == "sendrecv" and not fallback and layout.max_muon_span() > 2:
        raise UnsupportedSpanError("a Muon parameter spans more than two ranks; use allgather or fallback")
    rank = comm.rank
    start, end = layout.rank_range(rank)
    local = layout.local_slices(rank)

    ns_in = np.zeros(layout.shard_size)
    for p, lo, hi in local:
        if p.kind == "muon":
            st = MuonState(shard.local(shard.momentum, lo, hi), shard.local(shard.master, lo, hi))
            shard.local(ns_in, lo, hi)[:] = momentum_pass(st, grads_flat[lo:hi], cfg)

    transient = 0
    full_ns_in: Dict[int, np.ndarray] = {}
    if strategy == "allgather":
        gathered = yield from comm.allgather(ns_in)
        transient = gathered.size
        for p, lo, hi in local:
            if p.kind == "muon":
                full_ns_in[p.pid] = gathered[p.offset:p.end].reshape(p.shape)
    else:
        for p in layout.params:
            if p.kind != "muon":
                continue
            owners = layout.owners(p.pid)
            if len(owners) > 2:
                lo, hi = max(p.offset, start), min(p.end, end)
                piece = ns_in[lo - start:hi - start] if lo < hi else np.zeros(0)
                full = yield from comm.allgather(piece)
                transient += full.size - piece.size
                if rank in owners:
                    full_ns_in[p.pid] = full.reshape(p.shape)
            elif rank in owners:
                full_ns_in[p.pid], received = yield from reconstruct_param(comm, layout, ns_in, p.pid)
                transient += received

    for p, lo, hi in local:
        if p.kind == "muon":
            ns_out = newton_schulz(full_ns_in[p.pid], cfg).reshape(-1)
            st = MuonState(shard.local(shard.momentum, lo, hi), shard.local(shard.master, lo, hi))
            weight_update(st, ns_out[lo - p.offset:hi - p.offset], cfg, p.shape)
        else:
            st = AdamWState(shard.local(shard.m1, lo, hi), shard.local(shard.m2, lo, hi),
                            shard.step, tuple(adam_cfg.betas), adam_cfg.eps)
            adamw_step(st, shard.local(shard.master, lo, hi), grads_flat[lo:hi], cfg.eta, cfg.delta)
    shard.step += 1

    weights_flat = yield from comm.allgather(shard.master)
    return StepResult(unflatten_params(layout, weights_flat), transient)


# --------------------------------------------------------------------------
# Memory accounting
# --------------------------------------------------------------------------

@dataclass
class MemoryReport:
    strategy: str
    bytes_per_element: int
    persistent: List[int]
    transient: List[int]

    @property
    def peak(self) -> List[int]:
        return [p + t for p, t in zip(self.persistent, self.transient)]

    @property
    def max_transient(self) -> int:
        return max(self.transient)

    @property
    def max_peak(self) -> int:
        return max(self.peak)

    @property
    def transient_share(self) -> float:
        """Fraction of the worst rank's peak optimizer memory that is transient."""
        i = int(np.argmax(self.peak))
        return self.transient[i] / self.peak[i] if self.peak[i] else 0.0


def received_elements(layout: ShardLayout, rank: int) -> int:
    """Elements ``rank`` receives to complete its split Muon parameters via SendRecv."""
    start, end = layout.rank_range(rank)
    n = 0
    for p, lo, hi in layout.local_slices(rank):
        if p.kind != "muon":
            continue
        if len(layout.owners(p.pid)) > 1:
            n += p.size - (hi - lo)
    return n


def peak_memory_estimate(layout: ShardLayout, strategy: str = "sendrecv", bytes_hp: int = 4,
                         bytes_transient: Optional[int] = None) -> MemoryReport:
    """Per-rank persistent optimizer bytes plus the reconstruction transient.

    Persistent state is master + momentum for Muon elements and master + two
    moments for AdamW elements. The all-gather strategy materializes the full
    padded vector on every rank; SendRecv only receives the missing halves of
    the (at most two) split parameters at the shard edges.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    bt = bytes_hp if bytes_transient is None else bytes_transient
    persistent, transient = [], []
    for r in range(layout.dp_degree):
        elems = sum((2 if p.kind == "muon" else 3) * (hi - lo) for p, lo, hi in layout.local_slices(r))
        persistent.append(elems * bytes_hp)
        if strategy == "allgather":
            transient.append(layout.padded_total * bt)
        else:
            transient.append(received_elements(layout, r) * bt)
    return MemoryReport(strategy, bytes_hp, persistent, transient)
