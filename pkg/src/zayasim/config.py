"""Run configuration: TOML files with ``[run]``, ``[topology]`` and ``[model]`` tables.

Grammar (every key optional)::

    [run]
    seed = 0
    format = "csv"          # or "json"
    out = "zayasim-out"     # default: $ZAYASIM_OUT, else ./zayasim-out

    [topology]
    ranks_per_node = 8
    nodes = 1
    link_bw_intra = 64e9    # bytes/s per xGMI link
    bw_max_intra = 450e9
    nic_bw = 50e9           # bytes/s per rank
    mode = "xgmi"           # or "switched"

    [topology.alpha]        # seconds per message
    intra = 5e-6
    inter = 15e-6

    [topology.beta]         # optional measured asymptotes, bytes/s
    "allreduce:inter" = 40e9

    [model]
    preset = "zaya1-base"   # or "tiny"; remaining keys override fields
    b = 4
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .simfabric import FabricTopology
from .zayanet import ZAYA1_BASE, ModelConfig, tiny_config

OUT_ENV = "ZAYASIM_OUT"
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    pass


def preset(name: str) -> ModelConfig:
    key = name.lower().replace("_", "-")
    if key in ("zaya1-base", "zaya1"):
        return ModelConfig(**ZAYA1_BASE.__dict__)
    if key == "tiny":
        return tiny_config()
    raise ConfigError(f"unknown model preset {name!r} (known: zaya1-base, tiny)")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "zayasim-out"))


@dataclass
class RunConfig:
    seed: int = 0
    format: str = "csv"
    out: Path = field(default_factory=default_out_dir)
    topology: FabricTopology = field(default_factory=FabricTopology)
    model: ModelConfig = field(default_factory=lambda: preset("zaya1-base"))

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")


def _table(doc: dict, name: str) -> dict:
    val = doc.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"[{name}] must be a table")
    return val


def parse_config(doc: dict) -> RunConfig:
    unknown = set(doc) - {"run", "topology", "model"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    run = dict(_table(doc, "run"))
    topo = dict(_table(doc, "topology"))
    model = dict(_table(doc, "model"))
    try:
        known = {f.name for f in fields(FabricTopology)}
        bad = set(topo) - known
        if bad:
            raise ConfigError(f"unknown topology keys: {sorted(bad)}")
        if "alpha" in topo:
            topo["alpha"] = {**FabricTopology().alpha, **topo["alpha"]}
        topology = FabricTopology(**topo)
        base = preset(model.pop("preset", "zaya1-base"))
        mcfg = ModelConfig.from_dict({**base.__dict__, **model})
        extra = set(run) - {"seed", "format", "out"}
        if extra:
            raise ConfigError(f"unknown run keys: {sorted(extra)}")
        out = Path(run["out"]) if "out" in run else default_out_dir()
        return RunConfig(int(run.get("seed", 0)), run.get("format", "csv"), out, topology, mcfg)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[os.PathLike]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return parse_config(doc)
