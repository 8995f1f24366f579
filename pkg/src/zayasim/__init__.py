"""Desk-scale reproductions of the systems pieces behind large MoE pretraining.

Modules: ``numcore`` (GEMM, fused norms, bf16), ``muon`` (optimizer),
``zayanet`` (router, balancer, residual scaling, CCA-lite, experts),
``simfabric`` (deterministic multi-rank fabric and cost model), ``zero1``
(sharded distributed Muon), ``ckpt`` (sharded checkpoints and reshaping),
``cpar`` (context parallelism), ``perfplan`` (closed-form planners) and
``cli``.
"""

__version__ = "0.1.0"
