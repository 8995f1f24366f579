"""Toy MLP and the data-parallel ZeRO-1 training loop built on the simulated fabric.

The toy model is a tanh MLP with hidden-layer biases, e.g. ``dims=(3, 4, 2)``
gives ``W0 (3x4)``, ``b0 (4,)``, ``W1 (4x2)``. Matrices train with Muon and
biases with AdamW, which exercises both optimizer paths and (with a small
alignment) both whole and split parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .muon import AdamWConfig, HybridOptimizer, MuonConfig
from .simfabric import Fabric, FabricTopology
from .zero1 import (MemoryReport, RankShard, ShardLayout, build_shards, distributed_muon_step,
                    flatten_params, peak_memory_estimate, unflatten_params)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ToyModel:
    dims: Tuple[int, ...] = (3, 4, 2)

    def __post_init__(self):
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError("dims needs at least an input and an output width")

    def param_decls(self) -> List[Tuple[str, Tuple[int, ...], str]]:
        out = []
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            out.append((f"W{i}", (self.dims[i], self.dims[i + 1]), "muon"))
            if i < n_layers - 1:
                out.append((f"b{i}", (self.dims[i + 1],), "adamw"))
        return out

    def init(self, seed: int = 0) -> Params:
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape, _ in self.param_decls():
            scale = 1.0 / np.sqrt(shape[0]) if len(shape) == 2 else 0.1
            out[name] = scale * rng.standard_normal(shape)
        return out

    def loss_and_grads(self, params: Params, x: np.ndarray, y: np.ndarray) -> Tuple[float, Params]:
        """``0.5 * mean_rows ||f(x) - y||^2`` and its gradients."""
        n_layers = len(self.dims) - 1
        acts = [x]
        h = x
        for i in range(n_layers):
            h = h @ params[f"W{i}"]
            if i < n_layers - 1:
                h = np.tanh(h + params[f"b{i}"])
            acts.append(h)
        diff = h - y
        rows = x.shape[0]
        loss = 0.5 * float(np.sum(diff * diff)) / rows
        grads: Params = {}
        d = diff / rows
        for i in reversed(range(n_layers)):
            grads[f"W{i}"] = acts[i].T @ d
            if i > 0:
                d = d @ params[f"W{i}"].T
                d = d * (1.0 - acts[i] ** 2)
                grads[f"b{i - 1}"] = d.sum(axis=0)
        return loss, grads


def toy_batches(model: ToyModel, steps: int, batch: int = 24, seed: int = 0):
    """Deterministic regression batches from a fixed random linear teacher."""
    rng = np.random.default_rng(seed + 1000)
    teacher = rng.standard_normal((model.dims[0], model.dims[-1]))
    out = []
    for _ in range(steps):
        x = rng.standard_normal((batch, model.dims[0]))
        out.append((x, np.sin(x @ teacher)))
    return out


def reference_train(model: ToyModel, params: Params, batches, cfg: Optional[MuonConfig] = None,
                    adam_cfg: Optional[AdamWConfig] = None) -> Tuple[List[float], Params]:
    """Single-rank full-batch training: the oracle for the distributed loop."""
    cfg = cfg or MuonConfig()
    kinds = {name: kind for name, _, kind in model.param_decls()}
    opt = HybridOptimizer({k: np.array(v) for k, v in params.items()}, cfg, adam_cfg or AdamWConfig(), kinds)
    losses = []
    w = dict(opt.master)
    for x, y in batches:
        loss, grads = model.loss_and_grads(w, x, y)
        losses.append(loss)
        w = opt.step(grads)
    return losses, w


@dataclass
class TrainState:
    layout: ShardLayout
    shards: List[RankShard]

    @property
    def step(self) -> int:
        return self.shards[0].step

    def weights(self) -> Params:
        flat = np.concatenate([s.master for s in sorted(self.shards, key=lambda s: s.rank)])
        return unflatten_params(self.layout, flat)


def init_state(model: ToyModel, params: Params, dp: int, alignment: int = 2) -> TrainState:
    layout = build_shards(model.param_decls(), dp, alignment)
    flat = flatten_params(layout, params)
    return TrainState(layout, [RankShard.from_weights(layout, r, flat) for r in range(dp)])


@dataclass
class TrainRun:
    losses: List[float]
    state: TrainState
    fabric: Fabric
    transient_elements: List[int]
    memory: MemoryReport = field(repr=False, default=None)


def _rank_loop(comm, shard, model, weights, batches, cfg, adam_cfg, strategy, fallback):
    dp = comm.size
    layout = shard.layout
    losses, transient = [], 0
    for x, y in batches:
        rows = x.shape[0] // dp
        sl = slice(comm.rank * rows, (comm.rank + 1) * rows)
        loss, grads = model.loss_and_grads(weights, x[sl], y[sl])
        # one fused gradient buffer plus the loss in the last slot
        buf = np.append(flatten_params(layout, grads), loss)
        total = yield from comm.allreduce(buf)
        avg = total / dp
        res = yield from distributed_muon_step(comm, shard, avg[:-1], cfg, adam_cfg, strategy, fallback)
        weights = res.weights
        losses.append(float(avg[-1]))
        transient = max(transient, res.transient_elements)
    return losses, transient


def train_distributed(model: ToyModel, state: TrainState, batches, cfg: Optional[MuonConfig] = None,
                      adam_cfg: Optional[AdamWConfig] = None, strategy: str = "sendrecv",
                      fallback: bool = False, topology: Optional[FabricTopology] = None) -> TrainRun:
    """Data-parallel ZeRO-1 training; ``state`` shards are updated in place."""
    cfg = cfg or MuonConfig()
    dp = state.layout.dp_degree
    for x, _ in batches:
        if x.shape[0] % dp:
            raise ValueError(f"batch of {x.shape[0]} rows does not split over dp={dp}")
    weights = state.weights()
    fabric = Fabric(dp, topology)
    shards = sorted(state.shards, key=lambda s: s.rank)
    results = fabric.run(_rank_loop, model, per_rank=lambda r: (shards[r],), weights=weights,
                         batches=batches, cfg=cfg, adam_cfg=adam_cfg, strategy=strategy, fallback=fallback)
    losses = results[0][0]
    return TrainRun(losses, state, fabric, [r[1] for r in results],
                    peak_memory_estimate(state.layout, strategy, bytes_hp=8))
