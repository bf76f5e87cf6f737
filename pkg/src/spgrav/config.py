"""Declarative run configuration (INI file with sections, flat keys).

One config file is the single source of truth for a reproducible run; CLI
flags override individual values and the ``SPGRAV_OUTDIR`` environment
variable overrides the output directory.  The resolved configuration is
hashed and the hash recorded in every output, so outputs from different
configurations refuse to be summarized together.
"""

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import TransformSpec
from .sampler import PriorSpec, Schedule


@dataclass
class RunConfig:
    # inputs
    regions: str | None = None
    flows: str | None = None
    weights: str | None = None
    panel: str | None = None
    panel_stock_name: str = "knowledge_stock"
    panel_depreciation: float = 0.10
    dyad_distance: str = "none"          # none | level | log
    # model
    k: int = 7
    grid_resolution: int = 2000
    logdet_method: str = "exact"
    rho_variant: str = "griddy"
    transforms: dict[str, str] = field(default_factory=dict)
    dense_dyads: bool = True
    # priors
    gamma_mean: float = 0.0
    gamma_variance: float = 1e4
    ig_rate: float = 5.0
    ig_shape: float = 0.05
    # schedule
    total: int = 25_000
    burn_in: int = 10_000
    thin: int = 1
    chains: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    checkpoint_every: int = 0
    # output
    output_dir: str = "out"
    level: float = 0.9
    # simulate section (used by the simulate command only)
    sim: dict = field(default_factory=dict)

    def priors(self) -> PriorSpec:
        return PriorSpec(gamma_mean=self.gamma_mean, gamma_variance=self.gamma_variance,
                         ig_rate=self.ig_rate, ig_shape=self.ig_shape)

    def schedule(self) -> Schedule:
        return Schedule(total=self.total, burn_in=self.burn_in, thin=self.thin)

    def transform_spec(self) -> TransformSpec:
        return TransformSpec(self.transforms)

    def chain_seeds(self) -> list[int]:
        seeds = list(self.seeds)
        while len(seeds) < self.chains:
            seeds.append(seeds[-1] + 1 if seeds else 0)
        return seeds[: self.chains]

    def validate(self, need_inputs: bool = False) -> None:
        if self.burn_in >= self.total:
            raise ValueError("schedule inconsistent: burn_in must be below total")
        if self.thin < 1 or (self.total - self.burn_in) % self.thin:
            raise ValueError("total - burn_in must be a multiple of thin")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.dyad_distance not in ("none", "level", "log"):
            raise ValueError("dyad_distance must be none, level or log")
        if self.logdet_method not in ("exact", "approximate"):
            raise ValueError("logdet_method must be exact or approximate")
        if self.rho_variant not in ("griddy", "metropolis"):
            raise ValueError("rho_variant must be griddy or metropolis")
        if need_inputs:
            for label in ("regions", "flows"):
                path = getattr(self, label)
                if path is None:
                    raise ValueError(f"config is missing the {label} input path")
                if not Path(path).exists():
                    raise ValueError(f"{label} path does not exist: {path}")
            for label in ("weights", "panel"):
                path = getattr(self, label)
                if path is not None and not Path(path).exists():
                    raise ValueError(f"{label} path does not exist: {path}")

    def resolved(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value
        return out

    def hash(self) -> str:
        payload = json.dumps(self.resolved(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()


def _parse_transforms(raw: str) -> dict[str, str]:
    out = {}
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ValueError(f"bad transform entry {item!r}; expected name:log or name:level")
        name, kind = item.rsplit(":", 1)
        out[name.strip()] = kind.strip()
    return out


def _parse_seeds(raw: str) -> list[int]:
    return [int(tok) for tok in raw.replace(",", " ").split()]


def load_config(path) -> RunConfig:
    """Read an INI config file into a RunConfig (unknown keys rejected)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ValueError(f"config file not found: {path}")
    cfg = RunConfig()

    known = {
        ("inputs", "regions"): ("regions", str),
        ("inputs", "flows"): ("flows", str),
        ("inputs", "weights"): ("weights", str),
        ("inputs", "panel"): ("panel", str),
        ("inputs", "panel_stock_name"): ("panel_stock_name", str),
        ("inputs", "panel_depreciation"): ("panel_depreciation", float),
        ("inputs", "dyad_distance"): ("dyad_distance", str),
        ("model", "k"): ("k", int),
        ("model", "grid_resolution"): ("grid_resolution", int),
        ("model", "logdet_method"): ("logdet_method", str),
        ("model", "rho_variant"): ("rho_variant", str),
        ("model", "transforms"): ("transforms", _parse_transforms),
        ("model", "dense_dyads"): ("dense_dyads", lambda s: s.lower() in ("1", "true", "yes")),
        ("priors", "gamma_mean"): ("gamma_mean", float),
        ("priors", "gamma_variance"): ("gamma_variance", float),
        ("priors", "ig_rate"): ("ig_rate", float),
        ("priors", "ig_shape"): ("ig_shape", float),
        ("schedule", "total"): ("total", int),
        ("schedule", "burn_in"): ("burn_in", int),
        ("schedule", "thin"): ("thin", int),
        ("schedule", "chains"): ("chains", int),
        ("schedule", "seeds"): ("seeds", _parse_seeds),
        ("schedule", "checkpoint_every"): ("checkpoint_every", int),
        ("output", "directory"): ("output_dir", str),
        ("output", "level"): ("level", float),
    }
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "simulate":
                cfg.sim[key] = raw
                continue
            try:
                attr, conv = known[(section, key)]
            except KeyError:
                raise ValueError(f"unknown config key [{section}] {key}") from None
            setattr(cfg, attr, conv(raw))

    if "SPGRAV_OUTDIR" in os.environ:
        cfg.output_dir = os.environ["SPGRAV_OUTDIR"]
    return cfg
