"""Context parallelism for convolutional compressed attention.

The sequence is cut into ``2*cp`` chunks and rank ``r`` holds chunks
``r`` and ``2*cp-1-r`` (zig-zag), which balances causal-attention work.
Three sequence-mixing ops need cross-chunk data:

* two stacked causal convolutions: each chunk receives the trailing
  ``(k0-1)+(k1-1)`` input tokens that precede it (the halo);
* the one-token value shift: all-gather, shift, re-shard (reduce-scatter
  in the backward pass);
* causal attention: ring attention with online softmax; the backward pass
  circulates key/value blocks and their gradients the opposite way.

Every distributed op is a generator run on :class:`simfabric.Fabric` and is
paired with a serial reference used as its oracle. Local arrays hold a
rank's two chunks concatenated in ascending chunk order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .simfabric import Fabric


@dataclass(frozen=True)
class CPLayout:
    seq_len: int
    cp_degree: int

    def __post_init__(self):
        if self.cp_degree < 1:
            raise ValueError("cp_degree must be >= 1")
        if self.seq_len < 1 or self.seq_len % (2 * self.cp_degree):
            raise ValueError(f"seq_len {self.seq_len} is not divisible by 2*cp = {2 * self.cp_degree}")

    @property
    def n_chunks(self) -> int:
        return 2 * self.cp_degree

    @property
    def chunk_len(self) -> int:
        return self.seq_len // self.n_chunks

    @property
    def chunks(self) -> List[Tuple[int, int]]:
        L = self.chunk_len
        return [(i * L, (i + 1) * L) for i in range(self.n_chunks)]

    @property
    def assignment(self) -> List[Tuple[int, int]]:
        return [(r, self.n_chunks - 1 - r) for r in range(self.cp_degree)]

    def owner(self, chunk: int) -> int:
        return min(chunk, self.n_chunks - 1 - chunk)

    def positions(self, rank: int) -> np.ndarray:
        return np.concatenate([np.arange(*self.chunks[c]) for c in self.assignment[rank]])

    def causal_work(self, rank: int) -> int:
        """Number of (query, key) pairs a rank's queries attend to, in chunk units."""
        return sum(c + 1 for c in self.assignment[rank])


def cp_layout(seq_len: int, cp_degree: int) -> CPLayout:
    return CPLayout(seq_len, cp_degree)


def shard_sequence(x: np.ndarray, layout: CPLayout) -> List[np.ndarray]:
    x = np.asarray(x)
    if x.shape[0] != layout.seq_len:
        raise ValueError(f"sequence has {x.shape[0]} tokens, layout expects {layout.seq_len}")
    return [x[layout.positions(r)].copy() for r in range(layout.cp_degree)]


def unshard_sequence(parts: Sequence[np.ndarray], layout: CPLayout) -> np.ndarray:
    first = np.asarray(parts[0])
    out = np.zeros((layout.seq_len,) + first.shape[1:], dtype=first.dtype)
    for r, part in enumerate(parts):
        out[layout.positions(r)] = part
    return out


def _split_local(local: np.ndarray, layout: CPLayout, rank: int) -> Dict[int, np.ndarray]:
    L = layout.chunk_len
    if local.shape[0] != 2 * L:
        raise ValueError(f"rank {rank} holds {local.shape[0]} tokens, expected {2 * L}")
    a, b = layout.assignment[rank]
    return {a: local[:L], b: local[L:]}


# --------------------------------------------------------------------------
# Causal convolutions (serial reference)
# --------------------------------------------------------------------------

def causal_conv_depthwise(x, w) -> np.ndarray:
    """``y[t, c] = sum_j w[j, c] * x[t - (k-1) + j, c]``; the last tap sees token ``t``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    T = x.shape[0]
    k = w.shape[0]
    y = np.zeros_like(x)
    for j in range(k):
        s = k - 1 - j
        if s < T:
            y[s:] += w[j] * x[:T - s]
    return y


def causal_conv_depthwise_backward(x, w, dy):
    x, w, dy = (np.asarray(a, dtype=np.float64) for a in (x, w, dy))
    T, k = x.shape[0], w.shape[0]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for j in range(k):
        s = k - 1 - j
        if s < T:
            dx[:T - s] += w[j] * dy[s:]
            dw[j] = np.sum(x[:T - s] * dy[s:], axis=0)
    return dx, dw


def _grouped(w, C: int, groups: int):
    k = w.shape[0]
    if C % groups or w.shape != (k, C, C // groups):
        raise ValueError(f"grouped conv weight must be (k, C, C/groups), got {w.shape} for C={C}, groups={groups}")
    cg = C // groups
    return w.reshape(k, groups, cg, cg), cg


def causal_conv_grouped(x, w, groups: int) -> np.ndarray:
    """Grouped causal conv; ``w[j, o, i]`` maps input ``i`` of ``o``'s group to output ``o``."""
    x = np.asarray(x, dtype=np.float64)
    T, C = x.shape
    wg, cg = _grouped(np.asarray(w, dtype=np.float64), C, groups)
    xg = x.reshape(T, groups, cg)
    y = np.zeros_like(xg)
    k = wg.shape[0]
    for j in range(k):
        s = k - 1 - j
        if s < T:
            y[s:] += np.einsum("tgi,goi->tgo", xg[:T - s], wg[j])
    return y.reshape(T, C)


def causal_conv_grouped_backward(x, w, dy, groups: int):
    x = np.asarray(x, dtype=np.float64)
    T, C = x.shape
    w = np.asarray(w, dtype=np.float64)
    wg, cg = _grouped(w, C, groups)
    xg = x.reshape(T, groups, cg)
    dyg = np.asarray(dy, dtype=np.float64).reshape(T, groups, cg)
    dx = np.zeros_like(xg)
    dw = np.zeros_like(wg)
    k = wg.shape[0]
    for j in range(k):
        s = k - 1 - j
        if s < T:
            dx[:T - s] += np.einsum("tgo,goi->tgi", dyg[s:], wg[j])
            dw[j] = np.einsum("tgi,tgo->goi", xg[:T - s], dyg[s:])
    return dx.reshape(T, C), dw.reshape(w.shape)


@dataclass(frozen=True)
class ConvParams:
    w0: np.ndarray  # depthwise, (k0, C)
    w1: np.ndarray  # grouped, (k1, C, C/groups)
    groups: int

    @property
    def halo(self) -> int:
        return (self.w0.shape[0] - 1) + (self.w1.shape[0] - 1)


def conv_stack(x, p: ConvParams) -> np.ndarray:
    return causal_conv_grouped(causal_conv_depthwise(x, p.w0), p.w1, p.groups)


def conv_stack_backward(x, p: ConvParams, dy):
    h = causal_conv_depthwise(x, p.w0)
    dh, dw1 = causal_conv_grouped_backward(h, p.w1, dy, p.groups)
    dx, dw0 = causal_conv_depthwise_backward(x, p.w0, dh)
    return dx, dw0, dw1


# --------------------------------------------------------------------------
# Halo exchange
# --------------------------------------------------------------------------

@dataclass
class HaloLog:
    """Every halo a rank consumed: ``(chunk, source_rank, tokens, via_fabric)``."""

    entries: List[Tuple[int, int, int, bool]] = field(default_factory=list)


def halo_exchange_conv(comm, layout: CPLayout, local_x: np.ndarray, p: ConvParams):
    """Distributed forward of the conv stack (generator).

    Chunks are processed in ascending order. Chunk ``c`` gets the ``halo``
    input tokens that precede it: the tail of ``halo(c-1) ++ chunk(c-1)``,
    which is simply the tail of chunk ``c-1`` whenever chunks are at least
    ``halo`` tokens long. Chunk 0 gets zeros. Returns ``(local_y, log)``.
    """
    H = p.halo
    rank = comm.rank
    chunks = _split_local(np.asarray(local_x, dtype=np.float64), layout, rank)
    width = local_x.shape[1:]
    log = HaloLog()
    carry: Dict[int, np.ndarray] = {}
    outs = {}
    last = layout.n_chunks - 1
    for c in sorted(chunks):
        if c == 0:
            halo = np.zeros((H,) + width)
        else:
            src = layout.owner(c - 1)
            if src == rank:
                halo = carry.pop(c)
            else:
                halo = yield from comm.recv(src, tag=("halo", c))
            log.entries.append((c, src, halo.shape[0], src != rank))
        ext = np.concatenate([halo, chunks[c]])
        outs[c] = conv_stack(ext, p)[H:]
        if c < last:
            nxt = ext[-H:].copy() if H else ext[:0].copy()
            dst = layout.owner(c + 1)
            if dst == rank:
                carry[c + 1] = nxt
            else:
                comm.send(dst, nxt, tag=("halo", c + 1))
    return np.concatenate([outs[c] for c in sorted(outs)]), log


def halo_conv_backward(comm, layout: CPLayout, local_x: np.ndarray, p: ConvParams, local_dy: np.ndarray):
    """Backward of :func:`halo_exchange_conv` (generator).

    The halos are rebuilt with the forward exchange, then chunks run in
    descending order and the gradient of each halo travels back to the
    previous chunk's owner: every forward send becomes a receive and vice
    versa. Weight gradients are summed over ranks with an all-reduce.
    Returns ``(local_dx, dw0, dw1)``.
    """
    H = p.halo
    rank = comm.rank
    xs = _split_local(np.asarray(local_x, dtype=np.float64), layout, rank)
    dys = _split_local(np.asarray(local_dy, dtype=np.float64), layout, rank)
    width = local_x.shape[1:]
    # forward halos again (activation recomputation)
    halos = {}
    carry = {}
    last = layout.n_chunks - 1
    for c in sorted(xs):
        if c == 0:
            halos[c] = np.zeros((H,) + width)
        else:
            src = layout.owner(c - 1)
            halos[c] = carry.pop(c) if src == rank else (yield from comm.recv(src, tag=("halo", c)))
        if c < last:
            nxt = np.concatenate([halos[c], xs[c]])[-H:].copy()
            dst = layout.owner(c + 1)
            if dst == rank:
                carry[c + 1] = nxt
            else:
                comm.send(dst, nxt, tag=("halo", c + 1))

    dw0 = np.zeros_like(p.w0)
    dw1 = np.zeros_like(p.w1)
    dxs = {}
    dcarry: Dict[int, np.ndarray] = {}
    for c in sorted(xs, reverse=True):
        ext = np.concatenate([halos[c], xs[c]])
        dext_out = np.concatenate([np.zeros((H,) + width), dys[c]])
        dext, g0, g1 = conv_stack_backward(ext, p, dext_out)
        dw0 += g0
        dw1 += g1
        if c < last:
            dst = layout.owner(c + 1)
            dtail = dcarry.pop(c) if dst == rank else (yield from comm.recv(dst, tag=("dhalo", c + 1)))
            if H:
                dext[-H:] += dtail
        dxs[c] = dext[H:]
        if c > 0:
            src = layout.owner(c - 1)
            dhalo = dext[:H].copy()
            if src == rank:
                dcarry[c - 1] = dhalo
            else:
                comm.send(src, dhalo, tag=("dhalo", c))
    flat = np.concatenate([dw0.ravel(), dw1.ravel()])
    if comm.size > 1:
        flat = yield from comm.allreduce(flat)
    dw0 = flat[:dw0.size].reshape(dw0.shape)
    dw1 = flat[dw0.size:].reshape(dw1.shape)
    return np.concatenate([dxs[c] for c in sorted(dxs)]), dw0, dw1


# --------------------------------------------------------------------------
# Value shift
# --------------------------------------------------------------------------

def value_shift(v) -> np.ndarray:
    """One-token delay along the sequence with a zero first token."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    out[1:] = v[:-1]
    return out


def value_shift_backward(dy) -> np.ndarray:
    dy = np.asarray(dy, dtype=np.float64)
    out = np.zeros_like(dy)
    out[:-1] = dy[1:]
    return out


def _rank_order(layout: CPLayout) -> np.ndarray:
    return np.concatenate([layout.positions(r) for r in range(layout.cp_degree)])


def value_shift_dist(comm, layout: CPLayout, local_v: np.ndarray):
    """All-gather along the sequence, shift right by one, keep the local chunks."""
    local_v = np.asarray(local_v, dtype=np.float64)
    _split_local(local_v, layout, comm.rank)
    gathered = yield from comm.allgather(local_v)
    gathered = gathered.reshape((-1,) + local_v.shape[1:])
    full = np.zeros_like(gathered)
    full[_rank_order(layout)] = gathered
    return value_shift(full)[layout.positions(comm.rank)]


def value_shift_dist_backward(comm, layout: CPLayout, local_dy: np.ndarray):
    """Scatter local grads into a full-length buffer, shift left, reduce-scatter."""
    local_dy = np.asarray(local_dy, dtype=np.float64)
    _split_local(local_dy, layout, comm.rank)
    full = np.zeros((layout.seq_len,) + local_dy.shape[1:])
    full[layout.positions(comm.rank)] = local_dy
    shifted = value_shift_backward(full)
    mine = yield from comm.reducescatter(shifted[_rank_order(layout)])
    return mine.reshape(local_dy.shape)


# --------------------------------------------------------------------------
# Causal attention
# --------------------------------------------------------------------------

def causal_attention(q, k, v):
    """Serial causal softmax attention over ``(T, heads, d)`` arrays; returns ``(o, lse)``."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    T, H, d = q.shape
    scale = 1.0 / np.sqrt(d)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    o = np.zeros_like(q)
    lse = np.zeros((T, H))
    for h in range(H):
        s = (q[:, h] @ k[:, h].T) * scale
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite attention scores")
        s[mask] = -np.inf
        mx = s.max(axis=1, keepdims=True)
        e = np.exp(s - mx)
        z = e.sum(axis=1, keepdims=True)
        o[:, h] = (e / z) @ v[:, h]
        lse[:, h] = (mx + np.log(z))[:, 0]
    return o, lse


def causal_attention_backward(q, k, v, do):
    q, k, v, do = (np.asarray(a, dtype=np.float64) for a in (q, k, v, do))
    T, H, d = q.shape
    scale = 1.0 / np.sqrt(d)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for h in range(H):
        s = (q[:, h] @ k[:, h].T) * scale
        s[mask] = -np.inf
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        dv[:, h] = p.T @ do[:, h]
        dp = do[:, h] @ v[:, h].T
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dq[:, h] = ds @ k[:, h] * scale
        dk[:, h] = ds.T @ q[:, h] * scale
    return dq, dk, dv


def _block_scores(q, k, qpos, kpos, scale):
    s = np.einsum("qhd,khd->qhk", q, k) * scale
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite attention scores")
    s[np.broadcast_to((kpos[None, :] > qpos[:, None])[:, None, :], s.shape)] = -np.inf
    return s


def ring_attention(comm, layout: CPLayout, q, k, v):
    """Ring attention forward (generator); returns local ``(o, lse)``.

    ``cp - 1`` ring steps pass the key/value block to the next rank. Each
    visiting block is folded in with a running max and denominator.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    rank, cp = comm.rank, layout.cp_degree
    qpos = layout.positions(rank)
    scale = 1.0 / np.sqrt(q.shape[-1])
    n, H = q.shape[:2]
    m = np.full((n, H), -np.inf)
    l = np.zeros((n, H))
    acc = np.zeros_like(q)
    block = (k, v, qpos)
    for step in range(cp):
        bk, bv, kpos = block
        s = _block_scores(q, bk, qpos, kpos, scale)
        with np.errstate(invalid="ignore"):
            m_new = np.maximum(m, s.max(axis=2))
            alpha = np.where(np.isfinite(m_new), np.exp(m - m_new), 0.0)
            p = np.where(np.isfinite(m_new)[..., None], np.exp(s - m_new[..., None]), 0.0)
        l = alpha * l + p.sum(axis=2)
        acc = alpha[..., None] * acc + np.einsum("qhk,khd->qhd", p, bv)
        m = m_new
        if step < cp - 1:
            comm.send((rank + 1) % cp, block, tag=("kv", step))
            block = yield from comm.recv((rank - 1) % cp, tag=("kv", step))
    return acc / l[..., None], m + np.log(l)


def ring_attention_backward(comm, layout: CPLayout, q, k, v, o, lse, do):
    """Ring attention backward (generator); returns local ``(dq, dk, dv)``.

    Blocks travel the opposite direction from the forward pass and carry
    their partial ``dk, dv`` with them; after ``cp`` moves every block is
    back on its owner with complete gradients.
    """
    q, k, v, o, do = (np.asarray(a, dtype=np.float64) for a in (q, k, v, o, do))
    rank, cp = comm.rank, layout.cp_degree
    qpos = layout.positions(rank)
    scale = 1.0 / np.sqrt(q.shape[-1])
    D = np.sum(do * o, axis=-1)
    dq = np.zeros_like(q)
    block = (k, v, qpos, np.zeros_like(k), np.zeros_like(v))
    for step in range(cp):
        bk, bv, kpos, bdk, bdv = block
        s = _block_scores(q, bk, qpos, kpos, scale)
        p = np.exp(s - lse[..., None])
        dp = np.einsum("qhd,khd->qhk", do, bv)
        ds = p * (dp - D[..., None])
        dq += np.einsum("qhk,khd->qhd", ds, bk) * scale
        bdk = bdk + np.einsum("qhk,qhd->khd", ds, q) * scale
        bdv = bdv + np.einsum("qhk,qhd->khd", p, do)
        block = (bk, bv, kpos, bdk, bdv)
        if cp > 1:
            comm.send((rank - 1) % cp, block, tag=("dkv", step))
            block = yield from comm.recv((rank + 1) % cp, tag=("dkv", step))
    return dq, block[3], block[4]


# --------------------------------------------------------------------------
# Serial-equivalence harness
# --------------------------------------------------------------------------

@dataclass
class CPReport:
    cp: int
    seq: int
    conv_fwd_err: float
    conv_bwd_err: float
    shift_fwd_err: float
    shift_bwd_err: float
    attn_fwd_err: float
    attn_bwd_err: float
    halos: int
    halo_tokens: List[int]
    halo_messages: int
    halo_bytes: int
    kv_steps_per_rank: List[int]
    bytes_sent: int

    def as_row(self) -> dict:
        row = dict(self.__dict__)
        row["halo_tokens"] = ";".join(map(str, self.halo_tokens))
        row["kv_steps_per_rank"] = ";".join(map(str, self.kv_steps_per_rank))
        return row


def _maxerr(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def cp_equivalence(cp: int, seq: int, channels: int = 4, groups: int = 2, heads: int = 2,
                   head_dim: int = 3, k0: int = 2, k1: int = 2, seed: int = 0) -> CPReport:
    """Run every distributed op against its serial reference on random data."""
    layout = cp_layout(seq, cp)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((seq, channels))
    p = ConvParams(rng.standard_normal((k0, channels)),
                   rng.standard_normal((k1, channels, channels // groups)), groups)
    dy = rng.standard_normal((seq, channels))
    v2 = rng.standard_normal((seq, head_dim))
    dv2 = rng.standard_normal((seq, head_dim))
    q, k, v, do = (rng.standard_normal((seq, heads, head_dim)) for _ in range(4))

    xs, dys = shard_sequence(x, layout), shard_sequence(dy, layout)
    v2s, dv2s = shard_sequence(v2, layout), shard_sequence(dv2, layout)
    qs, ks, vs, dos = (shard_sequence(a, layout) for a in (q, k, v, do))

    fab = Fabric(cp)

    def program(comm):
        r = comm.rank
        y, log = yield from halo_exchange_conv(comm, layout, xs[r], p)
        dx, dw0, dw1 = yield from halo_conv_backward(comm, layout, xs[r], p, dys[r])
        sv = yield from value_shift_dist(comm, layout, v2s[r])
        dsv = yield from value_shift_dist_backward(comm, layout, dv2s[r])
        o, lse = yield from ring_attention(comm, layout, qs[r], ks[r], vs[r])
        dq, dk, dv = yield from ring_attention_backward(comm, layout, qs[r], ks[r], vs[r], o, lse, dos[r])
        return dict(y=y, log=log, dx=dx, dw0=dw0, dw1=dw1, sv=sv, dsv=dsv, o=o, dq=dq, dk=dk, dv=dv)

    res = fab.run(program)
    gather = lambda key: unshard_sequence([r[key] for r in res], layout)

    y_ref = conv_stack(x, p)
    dx_ref, dw0_ref, dw1_ref = conv_stack_backward(x, p, dy)
    o_ref, _ = causal_attention(q, k, v)
    dq_ref, dk_ref, dv_ref = causal_attention_backward(q, k, v, do)

    conv_bwd = max(_maxerr(gather("dx"), dx_ref),
                   max(_maxerr(r["dw0"], dw0_ref) for r in res),
                   max(_maxerr(r["dw1"], dw1_ref) for r in res))
    attn_bwd = max(_maxerr(gather("dq"), dq_ref), _maxerr(gather("dk"), dk_ref), _maxerr(gather("dv"), dv_ref))
    entries = [e for r in res for e in r["log"].entries]
    halo_sends = [e for e in fab.sends() if isinstance(e.tag, tuple) and e.tag[0] == "halo"]
    kv = [sum(1 for e in fab.sends() if e.rank == r and isinstance(e.tag, tuple) and e.tag[0] == "kv")
          for r in range(cp)]
    # the backward re-runs the forward exchange; count the first pass only
    n_halo_msgs = len(halo_sends) // 2
    return CPReport(
        cp=cp, seq=seq,
        conv_fwd_err=_maxerr(gather("y"), y_ref),
        conv_bwd_err=conv_bwd,
        shift_fwd_err=_maxerr(gather("sv"), value_shift(v2)),
        shift_bwd_err=_maxerr(gather("dsv"), value_shift_backward(dv2)),
        attn_fwd_err=_maxerr(gather("o"), o_ref),
        attn_bwd_err=attn_bwd,
        halos=len(entries),
        halo_tokens=sorted({e[2] for e in entries}),
        halo_messages=n_halo_msgs,
        halo_bytes=sum(e.nbytes for e in halo_sends[:n_halo_msgs]),
        kv_steps_per_rank=kv,
        bytes_sent=fab.bytes_sent(),
    )
