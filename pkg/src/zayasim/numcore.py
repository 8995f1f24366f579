"""Dense reference kernels: GEMM, fused residual-add + LayerNorm/RMSNorm, bf16 views.

Matrices are plain 2-D ``numpy`` arrays. The default compute precision is
float64 so every kernel can be checked against a hand-written oracle; the
``bf16_io`` switches emulate a float32 kernel with bfloat16 inputs/outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

NormMode = Literal["layernorm", "rmsnorm"]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# bfloat16 emulation
# --------------------------------------------------------------------------

def bf16_bits(x) -> np.ndarray:
    """Round to bfloat16 (round-to-nearest-even) and return the raw uint16 bits."""
    f = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    u = f.view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    bits = rounded.astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        bits[nan] = 0x7FC0
    return bits


def bf16_from_bits(bits) -> np.ndarray:
    u = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return u.view(np.float32)


def bf16_round(x) -> np.ndarray:
    """Values of ``x`` rounded to the nearest bfloat16, returned as float32."""
    return bf16_from_bits(bf16_bits(x)).reshape(np.shape(x))


# --------------------------------------------------------------------------
# GEMM
# --------------------------------------------------------------------------

def gemm(a, b, trans_a: bool = False, trans_b: bool = False) -> np.ndarray:
    """Textbook ``op(a) @ op(b)`` with a fixed, sequential reduction order.

    Each output element accumulates its products over the inner dimension
    strictly left to right starting from zero, so the result is bitwise equal
    to a naive triple loop in the same precision.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if trans_a:
        a = a.T
    if trans_b:
        b = b.T
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for p in range(k):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def gemm_flop_count(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


# --------------------------------------------------------------------------
# Fused residual add + normalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormSaved:
    mode: str
    epsilon: float
    inv_std: np.ndarray
    mu: Optional[np.ndarray] = None
    # layernorm: variance, rmsnorm: mean square. Kept for inspection only.
    var: Optional[np.ndarray] = None


def _welford_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-pass Welford mean/variance per row, columns combined left to right."""
    rows, n = v.shape
    mean = np.zeros(rows, dtype=v.dtype)
    m2 = np.zeros(rows, dtype=v.dtype)
    for j in range(n):
        x = v[:, j]
        delta = x - mean
        mean = mean + delta / v.dtype.type(j + 1)
        m2 = m2 + delta * (x - mean)
    return mean, m2 / v.dtype.type(n)


def _mean_square_rows(v: np.ndarray) -> np.ndarray:
    rows, n = v.shape
    acc = np.zeros(rows, dtype=v.dtype)
    for j in range(n):
        acc = acc + v[:, j] * v[:, j]
    return acc / v.dtype.type(n)


def norm_forward(
    x,
    residual,
    gamma,
    beta,
    epsilon: float,
    mode: NormMode = "layernorm",
    bf16_io: bool = False,
):
    """Fused ``v = x + residual`` followed by LayerNorm or RMSNorm and affine.

    Returns ``(y, residual_out, saved)`` where ``residual_out`` is ``v``.
    With ``bf16_io`` the inputs and outputs are rounded to bfloat16 and the
    statistics are computed in float32.
    """
    dtype = np.float32 if bf16_io else np.float64
    x = as_matrix(bf16_round(x) if bf16_io else x, dtype)
    residual = as_matrix(bf16_round(residual) if bf16_io else residual, dtype)
    gamma = np.asarray(gamma, dtype=dtype).reshape(-1)
    beta = np.asarray(beta, dtype=dtype).reshape(-1)
    if x.shape != residual.shape:
        raise ShapeError(f"x {x.shape} and residual {residual.shape} differ")
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"gamma/beta must have length {n}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    v = x + residual
    eps = dtype(epsilon)
    if mode == "layernorm":
        mu, var = _welford_rows(v)
        inv_std = dtype(1.0) / np.sqrt(var + eps)
        vhat = (v - mu[:, None]) * inv_std[:, None]
        saved = NormSaved(mode, float(epsilon), inv_std, mu, var)
    elif mode == "rmsnorm":
        ms = _mean_square_rows(v)
        inv_std = dtype(1.0) / np.sqrt(ms + eps)
        vhat = v * inv_std[:, None]
        saved = NormSaved(mode, float(epsilon), inv_std, None, ms)
    else:
        raise ValueError(f"unknown norm mode {mode!r}")

    y = gamma * vhat + beta
    if bf16_io:
        return bf16_round(y), bf16_round(v), saved
    return y, v, saved


def norm_backward(g, saved: NormSaved, v, gamma):
    """Gradients of the fused norm given upstream ``g`` and the forward's ``v``.

    ``v`` is the ``residual_out`` returned by :func:`norm_forward`; the
    normalized activations are rebuilt from it and the saved statistics.
    The returned ``dx`` is also the gradient with respect to ``residual``.
    """
    g = as_matrix(g)
    v = as_matrix(v, g.dtype)
    gamma = np.asarray(gamma, dtype=g.dtype).reshape(-1)
    rows, n = v.shape
    if g.shape != v.shape or saved.inv_std.shape != (rows,) or gamma.shape != (n,):
        raise ShapeError(f"gradient {g.shape} does not match the saved forward state {v.shape}")
    inv_std = saved.inv_std[:, None]
    if saved.mode == "layernorm":
        vhat = (v - saved.mu[:, None]) * inv_std
    else:
        vhat = v * inv_std

    gg = g * gamma
    s2 = (gg * vhat).sum(axis=1, keepdims=True)
    if saved.mode == "layernorm":
        s1 = gg.sum(axis=1, keepdims=True)
        dx = inv_std / n * (n * gg - s1 - vhat * s2)
    else:
        dx = inv_std / n * (n * gg - vhat * s2)
    dgamma = (g * vhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx, dgamma, dbeta


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
