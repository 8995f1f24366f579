"""Toy-scale MoE++ building blocks.

* MLP router with depth averaging of the down-projected representation and
  bias-only load balancing driven by a PID controller,
* per-channel residual scaling,
* compressed convolutional attention preprocessing (projections, two causal
  convolutions, one-token delay on the second value stream),
* SwiGLU expert layer with dispatch/combine.

All math is float64 numpy. Every block has a hand-written backward pass so
the gradients can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .cpar import ConvParams, conv_stack, conv_stack_backward, value_shift, value_shift_backward
from .numcore import NormSaved, norm_backward, norm_forward


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    h: int = 2048
    a: int = 16
    a_q: int = 8
    g: int = 2
    L: int = 40
    v: int = 262272
    E: int = 16
    k: int = 1
    D: int = 256
    f: int = 4096
    f_o: int = 2048
    k0: int = 2
    k1: int = 2
    s: int = 4096
    b: int = 5
    t: int = 1

    def __post_init__(self):
        if self.h % self.a:
            raise ValueError(f"h={self.h} is not divisible by a={self.a}")
        if self.f_o * 2 != self.f:
            raise ValueError(f"SwiGLU needs f_o = f/2 (f={self.f}, f_o={self.f_o})")
        if not 1 <= self.k <= self.E:
            raise ValueError(f"need 1 <= k <= E (k={self.k}, E={self.E})")
        if min(self.a_q, self.g, self.L, self.D, self.k0, self.k1, self.s, self.b, self.t) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def d_h(self) -> int:
        return self.h // self.a

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


ZAYA1_BASE = ModelConfig()


def tiny_config(**over) -> ModelConfig:
    base = dict(h=16, a=4, a_q=2, g=2, L=2, v=128, E=4, k=1, D=8, f=12, f_o=6, k0=2, k1=2, s=8, b=1)
    base.update(over)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# Small helpers
# --------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _finite(name, x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")


def topk_indices(x, k: int) -> np.ndarray:
    """Top-``k`` column indices per row, largest first, ties to the lowest index."""
    order = np.argsort(-x, axis=-1, kind="stable")
    return order[..., :k]


# --------------------------------------------------------------------------
# Router
# --------------------------------------------------------------------------

@dataclass
class RouterState:
    W_down: np.ndarray
    mlp1: np.ndarray
    mlp2: np.ndarray
    logits_w: np.ndarray
    gamma: float = 0.0
    bias: Optional[np.ndarray] = None
    prev_r: Optional[np.ndarray] = None
    norm_eps: float = 1e-6

    def __post_init__(self):
        h, D = self.W_down.shape
        E = self.logits_w.shape[1]
        if self.mlp1.shape != (D, D) or self.mlp2.shape != (D, D) or self.logits_w.shape[0] != D:
            raise ValueError("router weight shapes are inconsistent")
        if self.bias is None:
            self.bias = np.zeros(E)
        if self.bias.shape != (E,):
            raise ValueError(f"bias must have length {E}")

    @property
    def E(self) -> int:
        return self.logits_w.shape[1]

    @classmethod
    def init(cls, h: int, D: int, E: int, seed: int = 0, gamma: float = 0.0) -> "RouterState":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((h, D)) / np.sqrt(h), rng.standard_normal((D, D)) / np.sqrt(D),
                   rng.standard_normal((D, D)) / np.sqrt(D), rng.standard_normal((D, E)) / np.sqrt(D), gamma)

    def n_params(self) -> int:
        """Matrix parameters added by the router: ``h*D + 2*D^2 + D*E``.

        The scalar depth-averaging coefficient is not counted.
        """
        return self.W_down.size + self.mlp1.size + self.mlp2.size + self.logits_w.size


def router_param_count(h: int, D: int, E: int) -> int:
    return h * D + 2 * D * D + D * E


@dataclass
class RouterOutput:
    scores: np.ndarray
    chosen: np.ndarray
    probs: np.ndarray
    r: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def router_forward(x, state: RouterState, k: int = 1, update_prev: bool = True) -> RouterOutput:
    """Score experts for every token and pick the top ``k`` of ``scores + bias``.

    ``r = x W_down + gamma * prev_r`` (``prev_r`` is zero on the first layer),
    then RMS normalization and a three-layer GeLU MLP produce the logits.
    The mixing probabilities come from the unbiased softmax scores.
    """
    x = np.asarray(x, dtype=np.float64)
    _finite("router input", x)
    r_local = x @ state.W_down
    prev = state.prev_r if state.prev_r is not None else np.zeros_like(r_local)
    if prev.shape != r_local.shape:
        raise ValueError(f"prev_r {prev.shape} does not match r {r_local.shape}")
    r = r_local + state.gamma * prev
    D = r.shape[1]
    n, _, saved = norm_forward(r, np.zeros_like(r), np.ones(D), np.zeros(D), state.norm_eps, mode="rmsnorm")
    z1 = n @ state.mlp1
    a1 = gelu(z1)
    z2 = a1 @ state.mlp2
    a2 = gelu(z2)
    logits = a2 @ state.logits_w
    _finite("router logits", logits)
    scores = softmax(logits)
    chosen = topk_indices(scores + state.bias, k)
    probs = np.take_along_axis(scores, chosen, axis=1)
    cache = dict(x=x, prev=prev, r=r, saved=saved, n=n, z1=z1, a1=a1, z2=z2, a2=a2)
    if update_prev:
        state.prev_r = r
    return RouterOutput(scores, chosen, probs, r, cache)


def router_backward(out: RouterOutput, state: RouterState, dprobs: np.ndarray):
    """Gradients of the chosen-expert probabilities (selection held fixed).

    Returns ``dx`` and a dict with ``W_down, mlp1, mlp2, logits_w, gamma``.
    """
    c = out.cache
    s = out.scores
    ds = np.zeros_like(s)
    np.put_along_axis(ds, out.chosen, dprobs, axis=1)
    dlogits = s * (ds - np.sum(ds * s, axis=1, keepdims=True))
    g = {"logits_w": c["a2"].T @ dlogits}
    da2 = dlogits @ state.logits_w.T
    dz2 = da2 * gelu_grad(c["z2"])
    g["mlp2"] = c["a1"].T @ dz2
    da1 = dz2 @ state.mlp2.T
    dz1 = da1 * gelu_grad(c["z1"])
    g["mlp1"] = c["n"].T @ dz1
    dn = dz1 @ state.mlp1.T
    D = dn.shape[1]
    dr, _, _ = norm_backward(dn, c["saved"], c["r"], np.ones(D))
    g["W_down"] = c["x"].T @ dr
    g["gamma"] = float(np.sum(dr * c["prev"]))
    return dr @ state.W_down.T, g


# --------------------------------------------------------------------------
# PID bias balancer
# --------------------------------------------------------------------------

@dataclass
class PIDBalancer:
    E: int
    kp: float = 0.01
    ki: float = 0.001
    kd: float = 0.001
    lr: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    # leaky integrator; 1.0 is the textbook accumulator, which winds up and
    # limit-cycles once the Adam-normalized bias steps reach equilibrium
    integral_decay: float = 0.9
    integral: np.ndarray = field(default=None)
    prev_error: np.ndarray = field(default=None)
    adam_m1: np.ndarray = field(default=None)
    adam_m2: np.ndarray = field(default=None)
    adam_step: int = 0

    def __post_init__(self):
        for name in ("integral", "prev_error", "adam_m1", "adam_m2"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.E))
            if getattr(self, name).shape != (self.E,):
                raise ValueError(f"{name} must have length E={self.E}")


def expert_loads(chosen: np.ndarray, E: int) -> np.ndarray:
    counts = np.bincount(np.asarray(chosen).reshape(-1), minlength=E)
    if counts.size > E:
        raise IndexError("expert index out of range")
    return counts / counts.sum()


def pid_bias_update(bal: PIDBalancer, loads, state: RouterState) -> np.ndarray:
    """One PID step toward uniform load; returns (and stores) the new bias.

    The control signal ``u = kp*e + ki*sum(e) + kd*de`` with ``e = load - 1/E``
    is smoothed by Adam-style moment estimates before the bias step, so an
    overloaded expert (``e > 0``) always has its bias lowered. The integral
    is leaky (``integral_decay``) to prevent wind-up.
    """
    loads = np.asarray(loads, dtype=np.float64)
    if loads.shape != (bal.E,):
        raise ValueError(f"loads must have length E={bal.E}")
    if np.any(loads < 0) or abs(loads.sum() - 1.0) > 1e-9:
        raise ValueError("loads must be a distribution (non-negative, summing to 1)")
    e = loads - 1.0 / bal.E
    bal.integral = bal.integral_decay * bal.integral + e
    u = bal.kp * e + bal.ki * bal.integral + bal.kd * (e - bal.prev_error)
    bal.prev_error = e
    b1, b2 = bal.betas
    bal.adam_step += 1
    bal.adam_m1 = b1 * bal.adam_m1 + (1 - b1) * u
    bal.adam_m2 = b2 * bal.adam_m2 + (1 - b2) * u * u
    m_hat = bal.adam_m1 / (1 - b1 ** bal.adam_step)
    v_hat = bal.adam_m2 / (1 - b2 ** bal.adam_step)
    bias = state.bias * (1 - bal.lr * bal.weight_decay)
    state.bias = bias - bal.lr * m_hat / (np.sqrt(v_hat) + bal.eps)
    return state.bias


def skewed_stream_balance(E: int = 8, tokens: int = 4096, steps: int = 500, hot_share: float = 0.6,
                          seed: int = 0, balancer: Optional[PIDBalancer] = None):
    """Closed-loop check: a score stream that sends ``hot_share`` of tokens to expert 0.

    Returns ``(max_load_history, final_bias, settled_max_load)``; each step
    draws fresh token scores, selects top-1 of ``scores + bias`` and feeds the
    loads back. ``settled_max_load`` re-evaluates the final bias on a large
    fresh batch, which removes the per-step sampling noise.
    """
    rng = np.random.default_rng(seed)
    skew = _calibrate_skew(E, hot_share)
    bal = balancer or PIDBalancer(E)
    state = RouterState(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, E)))
    history = []
    for _ in range(steps):
        scores = softmax(rng.standard_normal((tokens, E)) + skew)
        loads = expert_loads(topk_indices(scores + state.bias, 1), E)
        history.append(float(loads.max()))
        pid_bias_update(bal, loads, state)
    scores = softmax(rng.standard_normal((16 * tokens, E)) + skew)
    settled = float(expert_loads(topk_indices(scores + state.bias, 1), E).max())
    return history, state.bias, settled


def _calibrate_skew(E: int, share: float, probe: int = 20000) -> np.ndarray:
    """Logit offset on expert 0 that makes it the argmax for ``share`` of tokens."""
    z = np.random.default_rng(12345).standard_normal((probe, E))
    lo, hi = 0.0, 10.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        skew = np.zeros(E)
        skew[0] = mid
        frac = np.mean(np.argmax(z + skew, axis=1) == 0)
        lo, hi = (mid, hi) if frac < share else (lo, mid)
    skew = np.zeros(E)
    skew[0] = 0.5 * (lo + hi)
    return skew


# --------------------------------------------------------------------------
# Residual scaling
# --------------------------------------------------------------------------

@dataclass
class ResidualScaleParams:
    alpha: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, h: int) -> "ResidualScaleParams":
        return cls(np.ones(h), np.zeros(h))


def residual_scale(x, p: ResidualScaleParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if p.alpha.shape != p.bias.shape or x.shape[-1:] != p.alpha.shape:
        raise ValueError(f"x {x.shape} vs alpha {p.alpha.shape}, bias {p.bias.shape}")
    return p.alpha * x + p.bias


def residual_scale_param_count(cfg: ModelConfig) -> int:
    """Two gate/bias pairs of width ``h`` per layer."""
    return cfg.L * 2 * (2 * cfg.h)


def residual_block(x_res, x_in, layer_fn, res_p: ResidualScaleParams, in_p: ResidualScaleParams):
    """``Res-scale(residual) + layer(Res-scale(input))``."""
    return residual_scale(x_res, res_p) + layer_fn(residual_scale(x_in, in_p))


# --------------------------------------------------------------------------
# CCA-lite sequence mixing
# --------------------------------------------------------------------------

@dataclass
class CCAParams:
    Wq: np.ndarray   # h x a_q*d_h
    Wk: np.ndarray   # h x g*d_h
    Wv1: np.ndarray  # h x g*d_h/2
    Wv2: np.ndarray  # h x g*d_h/2
    conv0: np.ndarray  # k0 x C, depthwise over the q|k channels
    conv1: np.ndarray  # k1 x C x d_h, grouped per head (a_q + g groups)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "CCAParams":
        rng = np.random.default_rng(seed)
        h, d = cfg.h, cfg.d_h
        C = (cfg.a_q + cfg.g) * d
        if (cfg.g * d) % 2:
            raise ValueError("value width g*d_h must be even")
        mk = lambda *s: rng.standard_normal(s) / np.sqrt(s[0])
        return cls(mk(h, cfg.a_q * d), mk(h, cfg.g * d), mk(h, cfg.g * d // 2), mk(h, cfg.g * d // 2),
                   rng.standard_normal((cfg.k0, C)), rng.standard_normal((cfg.k1, C, d)) / np.sqrt(d))

    def conv_params(self, cfg: ModelConfig) -> ConvParams:
        return ConvParams(self.conv0, self.conv1, cfg.a_q + cfg.g)


def cca_mix(tokens, p: CCAParams, cfg: ModelConfig):
    """Project, convolve q|k along the sequence and delay the second value stream.

    Returns ``(q, k, v)`` shaped ``(s, a_q, d_h)``, ``(s, g, d_h)``, ``(s, g, d_h)``.
    """
    x = np.asarray(tokens, dtype=np.float64)
    s = x.shape[0]
    if s < cfg.k0 + cfg.k1 - 1:
        raise ValueError(f"sequence of {s} tokens is shorter than the receptive field {cfg.k0 + cfg.k1 - 1}")
    d = cfg.d_h
    qk = np.concatenate([x @ p.Wq, x @ p.Wk], axis=1)
    mixed = conv_stack(qk, p.conv_params(cfg))
    q = mixed[:, :cfg.a_q * d].reshape(s, cfg.a_q, d)
    k = mixed[:, cfg.a_q * d:].reshape(s, cfg.g, d)
    v = np.concatenate([x @ p.Wv1, value_shift(x @ p.Wv2)], axis=1).reshape(s, cfg.g, d)
    return q, k, v


def cca_mix_backward(tokens, p: CCAParams, cfg: ModelConfig, dq, dk, dv):
    x = np.asarray(tokens, dtype=np.float64)
    s = x.shape[0]
    d = cfg.d_h
    qk = np.concatenate([x @ p.Wq, x @ p.Wk], axis=1)
    dmixed = np.concatenate([np.reshape(dq, (s, -1)), np.reshape(dk, (s, -1))], axis=1)
    dqk, dc0, dc1 = conv_stack_backward(qk, p.conv_params(cfg), dmixed)
    nq = cfg.a_q * d
    dv = np.reshape(dv, (s, -1))
    half = dv.shape[1] // 2
    dv1, dv2 = dv[:, :half], value_shift_backward(dv[:, half:])
    grads = {"Wq": x.T @ dqk[:, :nq], "Wk": x.T @ dqk[:, nq:], "Wv1": x.T @ dv1, "Wv2": x.T @ dv2,
             "conv0": dc0, "conv1": dc1}
    dx = dqk[:, :nq] @ p.Wq.T + dqk[:, nq:] @ p.Wk.T + dv1 @ p.Wv1.T + dv2 @ p.Wv2.T
    return dx, grads


# --------------------------------------------------------------------------
# Experts and the MoE layer
# --------------------------------------------------------------------------

@dataclass
class Expert:
    fc1: np.ndarray  # h x f
    fc2: np.ndarray  # f_o x h

    @classmethod
    def init(cls, h: int, f: int, rng) -> "Expert":
        return cls(rng.standard_normal((h, f)) / np.sqrt(h), rng.standard_normal((f // 2, h)) / np.sqrt(f // 2))


def swiglu(z):
    a, b = np.split(z, 2, axis=-1)
    return a * sigmoid(a) * b


def swiglu_backward(z, dy):
    a, b = np.split(z, 2, axis=-1)
    sg = sigmoid(a)
    silu = a * sg
    da = dy * b * sg * (1 + a * (1 - sg))
    return np.concatenate([da, dy * silu], axis=-1)


def expert_forward(x, e: Expert):
    return swiglu(x @ e.fc1) @ e.fc2


@dataclass
class MoEOutput:
    out: np.ndarray
    router: RouterOutput
    perm: np.ndarray
    counts: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def dispatch(chosen: np.ndarray, E: int):
    """Stable permutation grouping (token, slot) pairs by expert, and group sizes."""
    flat = np.asarray(chosen).reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= E):
        raise IndexError(f"expert index out of range for E={E}")
    perm = np.argsort(flat, kind="stable")
    return perm, np.bincount(flat, minlength=E)


def moe_layer_forward(tokens, router: RouterState, experts: Sequence[Expert], cfg: ModelConfig,
                      update_prev: bool = True) -> MoEOutput:
    """Route, permute into per-expert groups, run SwiGLU experts, scale by the
    routing probability and scatter back to the original token order."""
    x = np.asarray(tokens, dtype=np.float64)
    if len(experts) != router.E:
        raise ValueError(f"{len(experts)} experts for a router over {router.E}")
    ro = router_forward(x, router, cfg.k, update_prev=update_prev)
    n, k = ro.chosen.shape
    perm, counts = dispatch(ro.chosen, router.E)
    token_of = perm // k
    xs = x[token_of]
    ys = np.zeros_like(xs)
    zs = []
    start = 0
    for e, cnt in enumerate(counts):
        sl = slice(start, start + cnt)
        z = xs[sl] @ experts[e].fc1
        zs.append(z)
        ys[sl] = swiglu(z) @ experts[e].fc2
        start += cnt
    weights = ro.probs.reshape(-1)[perm]
    out = np.zeros_like(x)
    np.add.at(out, token_of, ys * weights[:, None])
    return MoEOutput(out, ro, perm, counts, dict(x=x, xs=xs, ys=ys, zs=zs, token_of=token_of, weights=weights))


def moe_layer_backward(mo: MoEOutput, router: RouterState, experts: Sequence[Expert], dout):
    """Gradients w.r.t. the tokens and all expert/router weights (selection fixed)."""
    c = mo.cache
    dout = np.asarray(dout, dtype=np.float64)
    token_of, weights = c["token_of"], c["weights"]
    dys_w = dout[token_of]
    dweights = np.sum(dys_w * c["ys"], axis=1)
    dys = dys_w * weights[:, None]
    dxs = np.zeros_like(c["xs"])
    expert_grads = []
    start = 0
    for e, cnt in enumerate(mo.counts):
        sl = slice(start, start + cnt)
        z = c["zs"][e]
        g2 = swiglu(z).T @ dys[sl]
        dz = swiglu_backward(z, dys[sl] @ experts[e].fc2.T)
        g1 = c["xs"][sl].T @ dz
        dxs[sl] = dz @ experts[e].fc1.T
        expert_grads.append({"fc1": g1, "fc2": g2})
        start += cnt
    dx = np.zeros_like(c["x"])
    np.add.at(dx, token_of, dxs)
    dprobs = np.zeros(mo.router.probs.size)
    dprobs[mo.perm] = dweights
    dx_router, router_grads = router_backward(mo.router, router, dprobs.reshape(mo.router.probs.shape))
    return dx + dx_router, expert_grads, router_grads


# --------------------------------------------------------------------------
# Full-model parameter table
# --------------------------------------------------------------------------

def param_decls(cfg: ModelConfig, include_embedding: bool = True) -> List[Tuple[str, Tuple[int, ...], str]]:
    """``(name, shape, optimizer)`` for every parameter, in declaration order.

    Matrix weights train with Muon; convolutions, embeddings, norms and
    residual-scale vectors train with AdamW.
    """
    h, d = cfg.h, cfg.d_h
    C = (cfg.a_q + cfg.g) * d
    out: List[Tuple[str, Tuple[int, ...], str]] = []
    if include_embedding:
        out.append(("embed", (cfg.v, h), "adamw"))
    for l in range(cfg.L):
        p = f"layer{l}."
        out += [
            (p + "norm_attn", (h,), "adamw"),
            (p + "cca.Wq", (h, cfg.a_q * d), "muon"),
            (p + "cca.Wk", (h, cfg.g * d), "muon"),
            (p + "cca.Wv1", (h, cfg.g * d // 2), "muon"),
            (p + "cca.Wv2", (h, cfg.g * d // 2), "muon"),
            (p + "cca.conv0", (cfg.k0, C), "adamw"),
            (p + "cca.conv1", (cfg.k1, C, d), "adamw"),
            (p + "cca.Wo", (cfg.a_q * d, h), "muon"),
            (p + "norm_mlp", (h,), "adamw"),
            (p + "router.W_down", (h, cfg.D), "muon"),
            (p + "router.mlp1", (cfg.D, cfg.D), "muon"),
            (p + "router.mlp2", (cfg.D, cfg.D), "muon"),
            (p + "router.logits", (cfg.D, cfg.E), "muon"),
        ]
        for e in range(cfg.E):
            out += [(p + f"expert{e}.fc1", (h, cfg.f), "muon"), (p + f"expert{e}.fc2", (cfg.f_o, h), "muon")]
        out += [(p + f"rscale.{path}.{part}", (h,), "adamw") for path in ("res", "in") for part in ("alpha", "bias")]
    out.append(("norm_final", (h,), "adamw"))
    return out
