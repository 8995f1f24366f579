"""Command-line front end.

Every command prints its report to stdout and writes it to
``<out>/<name>.<csv|json>``. Exit codes: 0 success, 1 validation or usage
error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import perfplan
from .bench import KERNELS, bench_memory
from .ckpt import (CheckpointError, checkpoint_report, checkpoint_sizes, load_checkpoint, reshape_checkpoint,
                   save_checkpoint)
from .config import ConfigError, RunConfig, load_config, preset
from .cpar import cp_equivalence
from .muon import MuonConfig
from .simfabric import predict_time, reference_collective, run_collective
from .train import ToyModel, init_state, toy_batches, train_distributed
from .zayanet import param_decls
from .zero1 import UnsupportedSpanError, build_shards, peak_memory_estimate

COLLECTIVES = ("allreduce", "allgather", "reducescatter", "alltoall", "broadcast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    return v


def emit(rows: List[Dict], name: str, cfg: RunConfig, quiet: bool = False) -> Path:
    rows = [{k: _plain(v) for k, v in r.items()} for r in rows]
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"{name}.{cfg.format}"
    if cfg.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        cols = []
        for r in rows:
            cols += [k for k in r if k not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    path.write_text(text)
    if not quiet:
        sys.stdout.write(text)
    return path


# --------------------------------------------------------------------------
# plan
# --------------------------------------------------------------------------

def cmd_plan(args, cfg: RunConfig) -> int:
    what = args.what
    if what == "xgmi":
        bw = perfplan.xgmi_bw(args.n, args.link_bw, args.mode, args.bmax)
        emit([{"n": args.n, "link_bw_bytes_s": args.link_bw, "mode": args.mode, "bw_bytes_s": bw}], "plan_xgmi", cfg)
    elif what == "fusion":
        m = perfplan.fusion_buffer_size(args.alpha, args.beta, args.epsilon)
        emit([{"alpha_s": args.alpha, "beta_bytes_s": args.beta, "epsilon": args.epsilon, "fusion_bytes": m,
               "achieved_bytes_s": perfplan.achieved_bandwidth(m, args.alpha, args.beta)}], "plan_fusion", cfg)
    elif what == "storage":
        plan = perfplan.StoragePlan(args.G, args.s, args.b, args.page, args.t, args.iops, args.sigma, args.m)
        rep = perfplan.storage_plan(plan)
        emit([{"bytes_per_iter": rep.bytes_per_iter, "pages_per_iter": rep.pages_per_iter,
               "io_per_iter": rep.io_per_iter, "iops_needed": rep.iops_needed, "t_break_s": rep.t_break,
               "sigma_est": rep.sigma_est, "sufficient": rep.sufficient}], "plan_storage", cfg)
    elif what == "checkpoint":
        meta = args.meta if args.meta is not None else [0] * args.dp
        s = checkpoint_sizes(args.pm, args.pa, args.blp, args.bhp, args.dp, meta)
        emit([{"P_M": args.pm, "P_A": args.pa, "b_lp": args.blp, "b_hp": args.bhp, "dp_degree": args.dp,
               "S_total_bytes": s.total, "S_rank0_bytes": s.rank0, "S_rank_r_bytes": s.rank_r}], "plan_checkpoint", cfg)
    elif what == "sizing":
        if args.m or args.n or args.k:
            if not (args.m and args.n and args.k):
                raise ValueError("give all of --m/--n/--k or none")
            shapes = [("custom", (args.m, args.n, args.k))]
        else:
            shapes = _gemm_shapes(cfg)
        rows = []
        for label, (m, n, k) in shapes:
            g = perfplan.gemm_flops(m, n, k)
            rows.append({"gemm": label, "M": m, "N": n, "K": k, "flops": g.flops, "peak_ready": g.peak_ready})
        emit(rows, "plan_sizing", cfg)
    elif what == "bands":
        c, lo, hi = perfplan.moe_bands(args.s, args.experts, args.band)
        emit([{"s": args.s, "experts": args.experts, "band": args.band, "center_tokens": c,
               "low_tokens": lo, "high_tokens": hi}], "plan_bands", cfg)
    elif what == "memory":
        model = cfg.model if args.preset is None else preset(args.preset)
        layout = build_shards(param_decls(model), args.dp, args.alignment)
        rows = []
        for strategy in ("sendrecv", "allgather"):
            r = peak_memory_estimate(layout, strategy, args.bytes)
            rows.append({"strategy": strategy, "dp": args.dp, "params": layout.total,
                         "padded_total": layout.padded_total, "max_persistent_bytes": max(r.persistent),
                         "max_transient_bytes": r.max_transient, "max_peak_bytes": r.max_peak,
                         "transient_share": r.transient_share})
        emit(rows, "plan_memory", cfg)
    return 0


def _gemm_shapes(cfg: RunConfig):
    m = cfg.model
    bs, h, d = m.b * m.s, m.h, m.d_h
    return [
        ("cca_q", (bs, m.a_q * d // m.t, h)),
        ("cca_k", (bs, m.g * d // m.t, h)),
        ("cca_out", (bs, h, m.a_q * d // m.t)),
        ("router_down", (bs, m.D, h)),
        ("router_mlp", (bs, m.D, m.D)),
        ("expert_fc1", (bs // m.E, m.f, h)),
        ("expert_fc2", (bs // m.E, h, m.f_o)),
        ("lm_head", (m.s, m.v, h)),
    ]


# --------------------------------------------------------------------------
# lint
# --------------------------------------------------------------------------

def cmd_lint(args, cfg: RunConfig) -> int:
    model = cfg.model if args.preset is None else preset(args.preset)
    over = {k: getattr(args, k) for k in ("v", "b", "s", "h", "a") if getattr(args, k) is not None}
    if over:
        model = replace(model, **over)
    found = perfplan.sizing_lint(model, args.t, include_advisories=args.advisories)
    rows = [{"rule": v.rule, "detail": v.detail, "advisory": v.advisory} for v in found]
    emit(rows or [{"rule": "", "detail": "", "advisory": ""}], "lint_sizing", cfg, quiet=True)
    for v in found:
        print(v)
    errors = sum(not v.advisory for v in found)
    print(f"{errors} violations")
    return 0


# --------------------------------------------------------------------------
# sim
# --------------------------------------------------------------------------

def cmd_sim(args, cfg: RunConfig) -> int:
    if args.what == "collective":
        rng = np.random.default_rng(cfg.seed)
        kinds = COLLECTIVES if args.kind == "all" else (args.kind,)
        rows = []
        for kind in kinds:
            n = args.ranks
            elems = max(1, args.bytes // 8)
            if kind in ("reducescatter", "alltoall"):
                elems = max(n, elems - elems % n)
            if kind == "alltoall":
                payloads = [list(rng.standard_normal((n, elems // n))) for _ in range(n)]
            else:
                payloads = [rng.standard_normal(elems) for _ in range(n)]
            got, fab = run_collective(kind, payloads, root=0, topology=cfg.topology)
            want = reference_collective(kind, payloads, root=0)
            ok = all(_close(a, b) for a, b in zip(got, want))
            msg = elems * 8
            pred = predict_time(cfg.topology, kind, msg, n)
            rows.append({"kind": kind, "ranks": n, "bytes": msg, "predicted_s": pred.seconds,
                         "algbw": pred.algbw, "busbw": pred.busbw, "measured_equivalence": ok,
                         "messages": len(fab.sends()), "wire_bytes": fab.bytes_sent()})
        emit(rows, "sim_collective", cfg)
        return 0 if all(r["measured_equivalence"] for r in rows) else 2
    rep = cp_equivalence(args.cp, args.seq, seed=cfg.seed)
    emit([rep.as_row()], "sim_cp", cfg)
    return 0


def _close(a, b) -> bool:
    if isinstance(a, list):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _toy(args):
    dims = tuple(int(d) for d in args.dims.split(","))
    return ToyModel(dims)


def cmd_train(args, cfg: RunConfig) -> int:
    model = _toy(args)
    params = model.init(cfg.seed)
    batches = toy_batches(model, args.steps, args.batch, cfg.seed)
    state = init_state(model, params, args.dp, args.alignment)
    run = train_distributed(model, state, batches, MuonConfig(eta=args.lr), strategy=args.strategy,
                            fallback=args.fallback, topology=cfg.topology)
    emit([{"step": i, "loss": l} for i, l in enumerate(run.losses)], "train_loss", cfg)
    sends = run.fabric.sends()
    emit([{"dp": args.dp, "strategy": args.strategy, "messages": len(sends),
           "wire_bytes": run.fabric.bytes_sent(),
           "param_exchanges": sum(1 for e in sends if isinstance(e.tag, tuple) and e.tag[0] == "param"),
           "predicted_comm_s": run.fabric.predicted_comm_time()}], "train_transcript", cfg, quiet=True)
    mem = run.memory
    emit([{"rank": r, "persistent_bytes": p, "transient_bytes": t, "measured_transient_bytes": m * 8}
          for r, (p, t, m) in enumerate(zip(mem.persistent, mem.transient, run.transient_elements))],
         "train_memory", cfg, quiet=True)
    if args.save:
        save_checkpoint(args.save, state, extra={"seed": cfg.seed, "dims": list(model.dims)})
    return 0


# --------------------------------------------------------------------------
# ckpt
# --------------------------------------------------------------------------

def cmd_ckpt(args, cfg: RunConfig) -> int:
    if args.what == "plan":
        if args.dir:
            rep = checkpoint_report(args.dir)
            rep["measured_ranks"] = ";".join(map(str, rep["measured_ranks"]))
            emit([rep], "ckpt_plan", cfg)
        else:
            s = checkpoint_sizes(args.pm, args.pa, args.blp, args.bhp, args.dp)
            emit([{"P_M": args.pm, "P_A": args.pa, "b_lp": args.blp, "b_hp": args.bhp, "dp_degree": args.dp,
                   "S_total": s.total, "S_rank0": s.rank0, "S_rank_r": s.rank_r}], "ckpt_plan", cfg)
    elif args.what == "reshape":
        out = reshape_checkpoint(args.src, args.dst, args.dp)
        emit([{"src": args.src, "dst": out, "dp": args.dp}], "ckpt_reshape", cfg)
    elif args.what == "verify":
        loaded = load_checkpoint(args.dir)
        man = loaded.manifest
        emit([{"dir": args.dir, "dp": man["dp_degree"], "step": man["step"], "params": man["total"],
               "files": len(man["files"]), "ok": True}], "ckpt_verify", cfg)
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def cmd_bench(args, cfg: RunConfig) -> int:
    sizes = [int(float(s) * (1 << 20)) for s in args.mib.split(",")]
    kernels = args.kernels.split(",")
    rows = bench_memory(sizes, kernels, args.repeats, args.threads)
    emit([asdict(r) for r in rows], "bench_memory", cfg)
    return 0 if all(r.verified for r in rows) else 2


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run/topology/model config")
    common.add_argument("--out", help="output directory (default: $ZAYASIM_OUT or ./zayasim-out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=("csv", "json"))

    p = _Parser(prog="zayasim", description="Planners and simulators for MoE training at cluster scale.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    plan = sub.add_parser("plan", help="closed-form planners")
    psub = plan.add_subparsers(dest="what", required=True, parser_class=_Parser)
    x = psub.add_parser("xgmi", parents=[common])
    x.add_argument("--n", type=int, required=True)
    x.add_argument("--link-bw", type=float, default=64e9)
    x.add_argument("--mode", choices=("xgmi", "switched"), default="xgmi")
    x.add_argument("--bmax", type=float)
    f = psub.add_parser("fusion", parents=[common])
    f.add_argument("--alpha", type=float, required=True)
    f.add_argument("--beta", type=float, required=True)
    f.add_argument("--epsilon", type=float, default=0.05)
    s = psub.add_parser("storage", parents=[common])
    for name, typ in (("G", int), ("s", int), ("b", int), ("page", int), ("t", float), ("iops", float)):
        s.add_argument(f"--{name}", type=typ, required=True)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--m", type=float)
    c = psub.add_parser("checkpoint", parents=[common])
    _ckpt_size_args(c)
    c.add_argument("--meta", type=int, nargs="+")
    z = psub.add_parser("sizing", parents=[common])
    z.add_argument("--m", type=int)
    z.add_argument("--n", type=int)
    z.add_argument("--k", type=int)
    b = psub.add_parser("bands", parents=[common])
    b.add_argument("--s", type=float, default=4096)
    b.add_argument("--experts", type=int, default=16)
    b.add_argument("--band", type=float, default=0.5)
    mm = psub.add_parser("memory", parents=[common])
    mm.add_argument("--preset")
    mm.add_argument("--dp", type=int, default=8)
    mm.add_argument("--alignment", type=int, default=64)
    mm.add_argument("--bytes", type=int, default=4, help="bytes per optimizer element")

    lint = sub.add_parser("lint", help="model sizing rules")
    lsub = lint.add_subparsers(dest="what", required=True, parser_class=_Parser)
    ls = lsub.add_parser("sizing", parents=[common])
    ls.add_argument("--preset")
    ls.add_argument("--t", type=int, default=1)
    for k in ("v", "b", "s", "h", "a"):
        ls.add_argument(f"--{k}", type=int)
    ls.add_argument("--advisories", action="store_true")

    sim = sub.add_parser("sim", help="fabric simulations")
    ssub = sim.add_subparsers(dest="what", required=True, parser_class=_Parser)
    sc = ssub.add_parser("collective", parents=[common])
    sc.add_argument("--kind", choices=COLLECTIVES + ("all",), default="all")
    sc.add_argument("--ranks", type=int, default=8)
    sc.add_argument("--bytes", type=int, default=1 << 16)
    cp = ssub.add_parser("cp", parents=[common])
    cp.add_argument("--cp", type=int, default=2)
    cp.add_argument("--seq", type=int, default=16)

    tr = sub.add_parser("train", help="toy ZeRO-1 training")
    tsub = tr.add_subparsers(dest="what", required=True, parser_class=_Parser)
    tt = tsub.add_parser("toy", parents=[common])
    tt.add_argument("--dp", type=int, default=2)
    tt.add_argument("--steps", type=int, default=10)
    tt.add_argument("--strategy", choices=("sendrecv", "allgather"), default="sendrecv")
    tt.add_argument("--fallback", action="store_true", help="all-gather parameters spanning >2 ranks")
    tt.add_argument("--dims", default="3,4,2")
    tt.add_argument("--batch", type=int, default=24)
    tt.add_argument("--alignment", type=int, default=2)
    tt.add_argument("--lr", type=float, default=0.02)
    tt.add_argument("--save", help="write a checkpoint of the final state here")

    ck = sub.add_parser("ckpt", help="checkpoint tools")
    csub = ck.add_subparsers(dest="what", required=True, parser_class=_Parser)
    cpl = csub.add_parser("plan", parents=[common])
    cpl.add_argument("--dir")
    _ckpt_size_args(cpl, required=False)
    cr = csub.add_parser("reshape", parents=[common])
    cr.add_argument("--src", required=True)
    cr.add_argument("--dst", required=True)
    cr.add_argument("--dp", type=int, required=True)
    cv = csub.add_parser("verify", parents=[common])
    cv.add_argument("--dir", required=True)

    be = sub.add_parser("bench", help="memory bandwidth microbenchmark")
    bsub = be.add_subparsers(dest="what", required=True, parser_class=_Parser)
    bm = bsub.add_parser("memory", parents=[common])
    bm.add_argument("--mib", default="64", help="comma-separated buffer sizes in MiB")
    bm.add_argument("--kernels", default=",".join(KERNELS))
    bm.add_argument("--repeats", type=int, default=5)
    bm.add_argument("--threads", type=int, default=1)
    return p


def _ckpt_size_args(p, required=True):
    p.add_argument("--pm", type=int, required=required, default=None if required else 0)
    p.add_argument("--pa", type=int, required=required, default=None if required else 0)
    p.add_argument("--blp", type=int, default=2)
    p.add_argument("--bhp", type=int, default=4)
    p.add_argument("--dp", type=int, required=required, default=None if required else 1)


COMMANDS = {"plan": cmd_plan, "lint": cmd_lint, "sim": cmd_sim, "train": cmd_train, "ckpt": cmd_ckpt,
            "bench": cmd_bench}


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    try:
        cfg = load_config(getattr(args, "config", None))
        if getattr(args, "out", None):
            cfg.out = Path(args.out)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "format", None):
            cfg.format = args.format
        return COMMANDS[args.cmd](args, cfg)
    except (ConfigError, CheckpointError, UnsupportedSpanError, ValueError) as exc:
        sys.stderr.write(f"zayasim: error: {exc}\n")
        return 1
    except Exception:  # noqa: BLE001 - report and map to the internal-error code
        traceback.print_exc()
        return 2


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
