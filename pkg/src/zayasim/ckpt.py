"""Sharded checkpoints: size model, per-rank files, loading and offline reshaping.

Directory layout::

    manifest.json        param table, layout, per-file CRC-64 digests
    weights.bin          consolidated bf16 weights (rank 0), param-table order
    shard_00000.bin ...  one optimizer shard per data-parallel rank
    COMPLETE             written last; a directory without it is partial

Shard file: ``b"ZCKP"``, u32 version, u32 dp_degree, u32 rank, u64 payload
length, then little-endian segments in param-table order covering only the
rank's slice of each parameter: master and momentum for Muon parameters,
master, m1 and m2 for AdamW parameters.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .numcore import bf16_bits, bf16_from_bits
from .simfabric import Fabric
from .train import TrainState
from .zero1 import RankShard, ShardLayout, build_shards, logical_state, shards_from_logical

MAGIC = b"ZCKP"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")
MARKER = "COMPLETE"
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
STATE_KEYS = {"muon": ("master", "momentum"), "adamw": ("master", "m1", "m2")}

PathLike = Union[str, os.PathLike]


class CheckpointError(RuntimeError):
    """Partial or corrupt checkpoint."""


class SimulatedCrash(RuntimeError):
    """Raised by the fault-injection hook in :func:`save_checkpoint`."""


# --------------------------------------------------------------------------
# CRC-64 (ECMA-182 polynomial, reflected, as used by xz)
# --------------------------------------------------------------------------

def _crc64_table():
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_CRC64 = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _CRC64[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# --------------------------------------------------------------------------
# Size model
# --------------------------------------------------------------------------

class CheckpointSizes(NamedTuple):
    total: float
    rank0: float
    rank_r: float


def _exact(x):
    return int(x) if float(x).is_integer() else float(x)


def checkpoint_sizes(P_M: int, P_A: int, b_lp: int, b_hp: int, dp_degree: int,
                     m_r: Optional[Sequence[int]] = None) -> CheckpointSizes:
    """Bytes written in total, by rank 0 (weights + shard) and by any other rank.

    ``m_r`` lists per-rank metadata bytes. Per-rank optimizer bytes are the
    even split ``(2 P_M + 3 P_A) b_hp / dp``; contiguous sharding makes real
    ranks deviate from it by the parameter mix at the shard edges, but the
    sum over ranks is exact.
    """
    if min(P_M, P_A, b_lp, b_hp) < 0 or dp_degree < 1:
        raise ValueError("counts must be >= 0 and dp_degree >= 1")
    m = list(m_r) if m_r is not None else [0] * dp_degree
    if len(m) != dp_degree:
        raise ValueError(f"need {dp_degree} metadata sizes, got {len(m)}")
    P = P_M + P_A
    opt = (2 * P_M + 3 * P_A) * b_hp
    total = P * b_lp + P_M * 2 * b_hp + P_A * 3 * b_hp + sum(m)
    rank0 = P * b_lp + opt / dp_degree + m[0]
    rank_r = opt / dp_degree + (m[1] if dp_degree > 1 else m[0])
    return CheckpointSizes(_exact(total), _exact(rank0), _exact(rank_r))


def shard_payload_bytes(layout: ShardLayout, rank: int, b_hp: int) -> int:
    """Exact payload bytes of ``rank``'s shard file under contiguous sharding."""
    return sum(len(STATE_KEYS[p.kind]) * (hi - lo) * b_hp for p, lo, hi in layout.local_slices(rank))


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------

def _hp_dtype(name: str) -> np.dtype:
    dt = np.dtype(name).newbyteorder("<")
    if dt.kind != "f":
        raise ValueError(f"high-precision dtype must be floating point, got {name}")
    return dt


def encode_shard(shard: RankShard, hp_dtype: str = "float32") -> bytes:
    dt = _hp_dtype(hp_dtype)
    parts = []
    for p, lo, hi in shard.layout.local_slices(shard.rank):
        for key in STATE_KEYS[p.kind]:
            parts.append(np.ascontiguousarray(shard.local(getattr(shard, key), lo, hi), dtype=dt).tobytes())
    payload = b"".join(parts)
    return HEADER.pack(MAGIC, VERSION, shard.layout.dp_degree, shard.rank, len(payload)) + payload


def decode_shard(blob: bytes, layout: ShardLayout, rank: int, step: int, hp_dtype: str = "float32") -> RankShard:
    if len(blob) < HEADER.size:
        raise CheckpointError("shard file shorter than its header")
    magic, version, dp, file_rank, length = HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"bad shard header: magic={magic!r} version={version}")
    if dp != layout.dp_degree or file_rank != rank:
        raise CheckpointError(f"shard header says dp={dp} rank={file_rank}, expected dp={layout.dp_degree} rank={rank}")
    if length != len(blob) - HEADER.size:
        raise CheckpointError("payload length does not match file size")
    dt = _hp_dtype(hp_dtype)
    n = layout.shard_size
    shard = RankShard(rank, layout, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), step)
    pos = HEADER.size
    for p, lo, hi in layout.local_slices(rank):
        for key in STATE_KEYS[p.kind]:
            nbytes = (hi - lo) * dt.itemsize
            seg = np.frombuffer(blob, dtype=dt, count=hi - lo, offset=pos)
            shard.local(getattr(shard, key), lo, hi)[:] = seg
            pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after the last segment")
    return shard


def encode_weights(layout: ShardLayout, master_flat: np.ndarray) -> bytes:
    return bf16_bits(master_flat[:layout.total]).astype("<u2").tobytes()


def decode_weights(layout: ShardLayout, blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) != 2 * layout.total:
        raise CheckpointError(f"weights file has {len(blob)} bytes, expected {2 * layout.total}")
    flat = bf16_from_bits(np.frombuffer(blob, dtype="<u2"))
    return {p.name: flat[p.offset:p.end].reshape(p.shape).copy() for p in layout.params}


def shard_filename(rank: int) -> str:
    return f"shard_{rank:05d}.bin"


def _param_table(layout: ShardLayout):
    return [{"id": p.pid, "name": p.name, "shape": list(p.shape), "offset": p.offset, "kind": p.kind}
            for p in layout.params]


def _layout_from_manifest(man: dict) -> ShardLayout:
    table = sorted(man["params"], key=lambda e: e["id"])
    layout = build_shards([(e["name"], tuple(e["shape"]), e["kind"]) for e in table],
                          man["dp_degree"], man["alignment"])
    if [p.offset for p in layout.params] != [e["offset"] for e in table]:
        raise CheckpointError("param table offsets are not contiguous in declaration order")
    if layout.padded_total != man["padded_total"]:
        raise CheckpointError("padded_total disagrees with the param table")
    return layout


def _write(path: Path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


# --------------------------------------------------------------------------
# Save / load / reshape
# --------------------------------------------------------------------------

def _write_directory(directory: Path, layout: ShardLayout, shards: Sequence[RankShard], weights_blob: bytes,
                     hp_dtype: str, step: int, extra: Optional[dict], fail_after: Optional[int]) -> Path:
    """All ranks write concurrently over the fabric; rank 0 commits after a barrier."""
    directory.mkdir(parents=True, exist_ok=True)
    for name in (MARKER,):
        if (directory / name).exists():
            (directory / name).unlink()
    written = [0]

    def guarded_write(path: Path, data: bytes):
        if fail_after is not None and written[0] >= fail_after:
            raise SimulatedCrash(f"crashed before writing {path.name}")
        _write(path, data)
        written[0] += 1

    def rank_program(comm, shard):
        blob = encode_shard(shard, hp_dtype)
        guarded_write(directory / shard_filename(comm.rank), blob)
        info = (shard_filename(comm.rank), crc64(blob), len(blob), HEADER.size)
        if comm.rank == 0:
            guarded_write(directory / WEIGHTS, weights_blob)
        infos = yield from comm.allgather_list(info)
        yield from comm.barrier()
        if comm.rank == 0:
            files = {name: {"crc64": f"{crc:016x}", "bytes": size} for name, crc, size, _ in infos}
            files[WEIGHTS] = {"crc64": f"{crc64(weights_blob):016x}", "bytes": len(weights_blob)}
            manifest = {
                "version": VERSION,
                "dp_degree": layout.dp_degree,
                "alignment": layout.alignment,
                "total": layout.total,
                "padded_total": layout.padded_total,
                "step": step,
                "hp_dtype": hp_dtype,
                "lp_dtype": "bfloat16",
                "params": _param_table(layout),
                "files": files,
                "metadata_bytes": [m for *_, m in infos],
                "extra": extra or {},
            }
            guarded_write(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True).encode())
            guarded_write(directory / MARKER, b"ok\n")

    fab = Fabric(layout.dp_degree)
    ordered = sorted(shards, key=lambda s: s.rank)
    fab.run(rank_program, per_rank=lambda r: (ordered[r],))
    return directory


def save_checkpoint(directory: PathLike, state: TrainState, hp_dtype: str = "float32",
                    extra: Optional[dict] = None, fail_after: Optional[int] = None) -> Path:
    """Write ``state`` as a sharded checkpoint.

    ``extra`` is stored verbatim in the manifest (e.g. replicated RNG seeds).
    ``fail_after=k`` simulates a crash after ``k`` files have been written.
    """
    layout = state.layout
    flat = np.concatenate([s.master for s in sorted(state.shards, key=lambda s: s.rank)])
    return _write_directory(Path(directory), layout, state.shards, encode_weights(layout, flat),
                            hp_dtype, state.step, extra, fail_after)


def read_manifest(directory: PathLike) -> dict:
    directory = Path(directory)
    if not (directory / MARKER).exists():
        raise CheckpointError(f"{directory} has no completion marker; checkpoint is partial")
    try:
        return json.loads((directory / MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable manifest in {directory}: {exc}") from exc


def _read_verified(directory: Path, man: dict, name: str) -> bytes:
    entry = man["files"].get(name)
    if entry is None:
        raise CheckpointError(f"{name} missing from manifest")
    try:
        blob = (directory / name).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {name}: {exc}") from exc
    if len(blob) != entry["bytes"] or f"{crc64(blob):016x}" != entry["crc64"]:
        raise CheckpointError(f"digest mismatch for {name}")
    return blob


@dataclass
class LoadedCheckpoint:
    manifest: dict
    state: TrainState
    bf16_weights: Dict[str, np.ndarray]


def load_checkpoint(directory: PathLike) -> LoadedCheckpoint:
    directory = Path(directory)
    man = read_manifest(directory)
    if man.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {man.get('version')}")
    layout = _layout_from_manifest(man)
    shards = [decode_shard(_read_verified(directory, man, shard_filename(r)), layout, r, man["step"], man["hp_dtype"])
              for r in range(layout.dp_degree)]
    weights = decode_weights(layout, _read_verified(directory, man, WEIGHTS))
    return LoadedCheckpoint(man, TrainState(layout, shards), weights)


def reshape_checkpoint(src: PathLike, dst: PathLike, new_dp: int) -> Path:
    """Unpad the optimizer state, re-partition it for ``new_dp`` and repad.

    The weights file is copied byte for byte.
    """
    if new_dp < 1:
        raise ValueError("new_dp must be >= 1")
    src, dst = Path(src), Path(dst)
    if src.resolve() == dst.resolve():
        raise ValueError("reshape needs a separate output directory")
    loaded = load_checkpoint(src)
    man = loaded.manifest
    old = loaded.state.layout
    new_layout = old.with_dp(new_dp)
    shards = shards_from_logical(new_layout, logical_state(old, loaded.state.shards), man["step"])
    weights_blob = _read_verified(src, man, WEIGHTS)
    return _write_directory(dst, new_layout, shards, weights_blob, man["hp_dtype"], man["step"],
                            man.get("extra"), None)


def checkpoint_report(directory: PathLike) -> dict:
    """Measured bytes next to the size-model prediction for a saved checkpoint."""
    man = read_manifest(directory)
    layout = _layout_from_manifest(man)
    b_hp = np.dtype(man["hp_dtype"]).itemsize
    P_M = sum(p.size for p in layout.params if p.kind == "muon")
    P_A = layout.total - P_M
    sizes = checkpoint_sizes(P_M, P_A, 2, b_hp, layout.dp_degree, man["metadata_bytes"])
    measured = [man["files"][shard_filename(r)]["bytes"] for r in range(layout.dp_degree)]
    measured_total = sum(measured) + man["files"][WEIGHTS]["bytes"]
    return {
        "P_M": P_M, "P_A": P_A, "b_lp": 2, "b_hp": b_hp, "dp_degree": layout.dp_degree,
        "S_total": sizes.total, "S_rank0": sizes.rank0, "S_rank_r": sizes.rank_r,
        "measured_total": measured_total,
        "measured_rank0": measured[0] + man["files"][WEIGHTS]["bytes"],
        "measured_ranks": measured,
        "manifest_bytes": (Path(directory) / MANIFEST).stat().st_size,
    }
