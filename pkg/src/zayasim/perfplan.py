"""Closed-form planners: link bandwidth, alpha-beta fits, fusion-buffer sizing,
GEMM FLOPs, model-sizing lint, MoE tuning bands and dataset storage IOPS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

GB = 1e9
PEAK_GEMM_FLOPS = 2e11
SIZING_GRANULE = 64


def xgmi_bw(n: int, b_link: float, mode: str = "xgmi", b_max: Optional[float] = None) -> float:
    """Achievable per-GPU intra-node bandwidth for ``n`` participating GPUs.

    Point-to-point xGMI engages one link per peer, so bandwidth is
    ``(n-1) * b_link``, optionally capped at ``b_max``. A switched fabric
    gives ``b_max`` regardless of ``n``.
    """
    if mode == "switched":
        if b_max is None:
            raise ValueError("switched mode needs b_max")
        return float(b_max)
    if mode != "xgmi":
        raise ValueError(f"unknown intra-node mode {mode!r}")
    if not 1 <= n <= 8:
        raise ValueError(f"xGMI supports 1..8 GPUs per node, got {n}")
    bw = (n - 1) * float(b_link)
    return min(bw, b_max) if b_max is not None else bw


# --------------------------------------------------------------------------
# alpha-beta model
# --------------------------------------------------------------------------

@dataclass
class AlphaBetaFit:
    alpha: float
    beta: float
    raw_alpha: float

    @property
    def clamped(self) -> bool:
        return self.raw_alpha < 0


def fit_alpha_beta(samples: Iterable[Tuple[float, float]]) -> AlphaBetaFit:
    """Least-squares fit of ``T = alpha + m / beta`` to (bytes, seconds) pairs.

    A negative fitted latency means the samples are inconsistent with the
    model; it is clamped to zero and flagged through ``raw_alpha``.
    """
    pts = np.asarray(list(samples), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (msg_bytes, seconds) samples")
    m, t = pts[:, 0], pts[:, 1]
    if np.unique(m).size < 2:
        raise ValueError("samples need at least two distinct message sizes")
    design = np.column_stack([np.ones_like(m), m])
    (alpha, inv_beta), *_ = np.linalg.lstsq(design, t, rcond=None)
    if not inv_beta > 0:
        raise ValueError("fitted bandwidth is not positive")
    return AlphaBetaFit(max(float(alpha), 0.0), float(1.0 / inv_beta), float(alpha))


def achieved_bandwidth(m: float, alpha: float, beta: float) -> float:
    if m <= 0:
        return 0.0
    return m / (alpha + m / beta)


def fusion_buffer_size(alpha: float, beta: float, epsilon: float = 0.05) -> float:
    """Smallest message reaching ``(1 - epsilon)`` of the asymptotic bandwidth."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if alpha < 0 or beta <= 0:
        raise ValueError("need alpha >= 0 and beta > 0")
    return alpha * beta * (1.0 - epsilon) / epsilon


# --------------------------------------------------------------------------
# GEMM sizing
# --------------------------------------------------------------------------

@dataclass
class GemmFlops:
    flops: int
    peak_ready: bool


def gemm_flops(m: int, n: int, k: int) -> GemmFlops:
    if min(m, n, k) < 1:
        raise ValueError("GEMM dimensions must be positive")
    flops = 2 * m * n * k
    return GemmFlops(flops, flops >= PEAK_GEMM_FLOPS)


@dataclass
class Violation:
    rule: str
    detail: str
    advisory: bool = False

    def __str__(self):
        tag = "advisory" if self.advisory else "violation"
        return f"{tag}: {self.rule} ({self.detail})"


def _pow2_rule(name: str, value: float) -> List[Violation]:
    if value != int(value):
        return [Violation(f"{name} % {SIZING_GRANULE} != 0", f"{name}={value} is not an integer")]
    value = int(value)
    if value % SIZING_GRANULE == 0:
        return []
    granule = math.gcd(value, SIZING_GRANULE)
    if granule >= 8:
        return [Violation(f"{name} % {SIZING_GRANULE} != 0",
                          f"{name}={value} is only divisible by {granule}", advisory=True)]
    return [Violation(f"{name} % {SIZING_GRANULE} != 0", f"{name}={value}")]


def sizing_lint(cfg, t: int = 1, include_advisories: bool = False) -> List[Violation]:
    """Check a model config against the GEMM-friendly sizing rules.

    ``cfg`` needs ``v, b, s, h, a`` attributes (and optionally ``a_q``).
    Divisibility by 8/16/32 without reaching 64 is reported as an advisory.
    """
    if t < 1:
        raise ValueError("tensor-parallel degree must be >= 1")
    out: List[Violation] = []
    if cfg.v % SIZING_GRANULE:
        out.append(Violation(f"v % {SIZING_GRANULE} != 0", f"v={cfg.v}"))
    out += _pow2_rule("b*s", cfg.b * cfg.s)
    out += _pow2_rule("h/a", cfg.h / cfg.a)
    out += _pow2_rule("h/t", cfg.h / t)
    head_counts = {"a": cfg.a}
    if getattr(cfg, "a_q", None):
        head_counts["a_q"] = cfg.a_q
    for name, heads in head_counts.items():
        if (cfg.b * heads) % t:
            out.append(Violation(f"(b*{name})/t not integer", f"b={cfg.b}, {name}={heads}, t={t}"))
    if not include_advisories:
        out = [v for v in out if not v.advisory]
    return out


def moe_bands(s: float, experts: int, band_frac: float = 0.5) -> Tuple[float, float, float]:
    """Expected per-expert token count under perfect balance and its tuning band."""
    if experts < 1:
        raise ValueError("need at least one expert")
    center = s / experts
    return center, center * (1.0 - band_frac), center * (1.0 + band_frac)


# --------------------------------------------------------------------------
# Dataset storage
# --------------------------------------------------------------------------

@dataclass
class StoragePlan:
    G: int
    s: int
    b: int
    P: int
    t: float
    I_max: float
    sigma: float = 1.0
    m: Optional[float] = None

    def __post_init__(self):
        if self.sigma < 1:
            raise ValueError("scatter factor sigma must be >= 1")
        if min(self.s, self.b, self.P) <= 0 or self.t <= 0 or self.I_max <= 0 or self.G < 0:
            raise ValueError("storage plan fields must be positive")


@dataclass
class StorageReport:
    bytes_per_iter: int
    pages_per_iter: int
    io_per_iter: float
    iops_needed: float
    t_break: float
    sigma_est: Optional[float]
    sufficient: bool

    def as_dict(self):
        return asdict(self)


def storage_plan(plan: StoragePlan) -> StorageReport:
    nbytes = plan.G * plan.s * plan.b
    pages = -(-nbytes // plan.P)
    io = plan.sigma * pages
    sigma_est = None
    if plan.m is not None:
        sigma_est = 1.0 + plan.m * plan.P / (plan.s * plan.b)
    t_break = io / plan.I_max
    return StorageReport(
        bytes_per_iter=nbytes,
        pages_per_iter=pages,
        io_per_iter=io,
        iops_needed=io / plan.t,
        t_break=t_break,
        sigma_est=sigma_est,
        sufficient=plan.t >= t_break,
    )
