"""Muon optimizer split into its three passes, plus the AdamW fallback.

The momentum pass and the weight update are elementwise and therefore work
unchanged on flat shards of a parameter; only the Newton-Schulz step needs
the whole 2-D matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .numcore import ShapeError, as_matrix, gemm

DEFAULT_NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass
class MuonConfig:
    mu: float = 0.95
    nesterov: bool = True
    eta: float = 0.02
    delta: float = 0.0
    ns_steps: int = 5
    ns_coeffs: Tuple[float, float, float] = DEFAULT_NS_COEFFS
    rms_match_constant: float = 0.2
    normalize: bool = True
    transpose_tall: bool = True
    gram_tile: int = 16

    def __post_init__(self):
        if self.ns_steps < 1:
            raise ValueError("ns_steps must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 <= self.mu < 1:
            raise ValueError("mu must lie in [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")


@dataclass
class AdamWConfig:
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class MuonState:
    """Momentum and master weights for one parameter (or one flat shard of it)."""

    momentum: np.ndarray
    master_weights: np.ndarray

    @classmethod
    def zeros_like(cls, w) -> "MuonState":
        w = np.array(w, dtype=np.float64)
        return cls(np.zeros_like(w), w)


@dataclass
class AdamWState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, w, cfg: Optional[AdamWConfig] = None) -> "AdamWState":
        cfg = cfg or AdamWConfig()
        w = np.asarray(w, dtype=np.float64)
        return cls(np.zeros_like(w), np.zeros_like(w), 0, tuple(cfg.betas), cfg.eps)


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")


def momentum_pass(state: MuonState, g, cfg: MuonConfig) -> np.ndarray:
    """``m <- mu*m + g`` in place; returns the Newton-Schulz input."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.momentum.shape:
        raise ShapeError(f"gradient {g.shape} vs momentum {state.momentum.shape}")
    _check_finite("gradient", g)
    m = state.momentum
    m *= cfg.mu
    m += g
    if cfg.nesterov:
        return g + cfg.mu * m
    return m.copy()


def symmetric_gram(x, tile: int = 16) -> np.ndarray:
    """``X @ X.T`` computed over upper-triangular tiles only and mirrored.

    Every tile uses the same sequential inner-product order as
    :func:`numcore.gemm`, so the result is bitwise equal to
    ``gemm(X, X, trans_b=True)`` and exactly symmetric.
    """
    x = as_matrix(x)
    if tile < 1:
        raise ValueError("tile must be >= 1")
    m, k = x.shape
    out = np.empty((m, m), dtype=x.dtype)
    for i0 in range(0, m, tile):
        i1 = min(i0 + tile, m)
        for j0 in range(i0, m, tile):
            j1 = min(j0 + tile, m)
            blk = np.zeros((i1 - i0, j1 - j0), dtype=x.dtype)
            for p in range(k):
                blk += np.multiply.outer(x[i0:i1, p], x[j0:j1, p])
            out[i0:i1, j0:j1] = blk
            out[j0:j1, i0:i1] = blk.T
    return out


def newton_schulz(x, cfg: MuonConfig, normalize: Optional[bool] = None) -> np.ndarray:
    """Quintic Newton-Schulz orthogonalization.

    One step is ``A = XX^T; A2 = AA^T; X <- aX + (bA + cA2)X`` with both Gram
    products formed by :func:`symmetric_gram`.
    """
    x = np.array(as_matrix(x), dtype=np.float64)
    if not np.any(x):
        raise ValueError("Newton-Schulz input is the zero matrix")
    normalize = cfg.normalize if normalize is None else normalize
    transposed = cfg.transpose_tall and x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    if normalize:
        x = x / (np.linalg.norm(x) + 1e-7)
    a, b, c = cfg.ns_coeffs
    for _ in range(cfg.ns_steps):
        gram = symmetric_gram(x, cfg.gram_tile)
        gram2 = symmetric_gram(gram, cfg.gram_tile)
        x = a * x + gemm(b * gram + c * gram2, x)
    return x.T if transposed else x


def update_scale(shape: Tuple[int, int], cfg: MuonConfig) -> float:
    """Adjusted Muon learning rate: ``eta * 0.2 * sqrt(max(rows, cols))``."""
    return cfg.eta * cfg.rms_match_constant * math.sqrt(max(shape))


def weight_update(state: MuonState, ns_out, cfg: MuonConfig, shape: Tuple[int, int]) -> np.ndarray:
    """Decoupled weight decay then the scaled orthogonal update, in place."""
    ns_out = np.asarray(ns_out, dtype=np.float64)
    _check_finite("Newton-Schulz output", ns_out)
    w = state.master_weights
    if ns_out.shape != w.shape:
        raise ShapeError(f"update {ns_out.shape} vs weights {w.shape}")
    w *= 1.0 - cfg.eta * cfg.delta
    w -= update_scale(shape, cfg) * ns_out
    return w


def adamw_step(state: AdamWState, w: np.ndarray, g, eta: float, delta: float) -> np.ndarray:
    """Bias-corrected Adam with decoupled weight decay; updates ``w`` in place."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != w.shape or g.shape != state.m1.shape:
        raise ShapeError(f"gradient {g.shape}, weights {w.shape}, state {state.m1.shape}")
    _check_finite("gradient", g)
    _check_finite("weights", w)
    b1, b2 = state.betas
    state.step += 1
    w *= 1.0 - eta * delta
    state.m1 *= b1
    state.m1 += (1.0 - b1) * g
    state.m2 *= b2
    state.m2 += (1.0 - b2) * g * g
    m_hat = state.m1 / (1.0 - b1 ** state.step)
    v_hat = state.m2 / (1.0 - b2 ** state.step)
    w -= eta * m_hat / (np.sqrt(v_hat) + state.eps)
    return w


def muon_step(state: MuonState, g, cfg: MuonConfig) -> np.ndarray:
    """Full single-rank Muon step for a 2-D parameter."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"Muon only applies to 2-D parameters, got shape {g.shape}")
    ns_in = momentum_pass(state, g, cfg)
    ns_out = newton_schulz(ns_in, cfg)
    return weight_update(state, ns_out, cfg, g.shape)


@dataclass
class HybridOptimizer:
    """Muon for 2-D parameters and AdamW for everything else, on one rank.

    ``kinds`` overrides the default assignment (e.g. embeddings to AdamW).
    """

    params: Dict[str, np.ndarray]
    muon_cfg: MuonConfig = field(default_factory=MuonConfig)
    adam_cfg: AdamWConfig = field(default_factory=AdamWConfig)
    kinds: Optional[Dict[str, str]] = None
    muon_states: Dict[str, MuonState] = field(init=False, default_factory=dict)
    adam_states: Dict[str, AdamWState] = field(init=False, default_factory=dict)

    def __post_init__(self):
        kinds = dict(self.kinds or {})
        for name, w in self.params.items():
            kind = kinds.setdefault(name, "muon" if np.ndim(w) == 2 else "adamw")
            if kind == "muon":
                if np.ndim(w) != 2:
                    raise ShapeError(f"Muon only applies to 2-D parameters ({name})")
                self.muon_states[name] = MuonState.zeros_like(w)
            elif kind == "adamw":
                self.adam_states[name] = AdamWState(
                    np.zeros(np.shape(w)), np.zeros(np.shape(w)), 0,
                    tuple(self.adam_cfg.betas), self.adam_cfg.eps)
            else:
                raise ValueError(f"unknown optimizer kind {kind!r} for {name}")
        self.kinds = kinds
        self.master = {name: np.array(w, dtype=np.float64) for name, w in self.params.items()}
        for name, st in self.muon_states.items():
            st.master_weights = self.master[name]

    def step(self, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        cfg = self.muon_cfg
        for name in self.params:
            if self.kinds[name] == "muon":
                muon_step(self.muon_states[name], grads[name], cfg)
            else:
                adamw_step(self.adam_states[name], self.master[name], grads[name], cfg.eta, cfg.delta)
        return {name: w.copy() for name, w in self.master.items()}
