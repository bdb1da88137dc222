"""Run configuration: TOML in, validated dataclasses out, resolved snapshot back to TOML.

Unknown sections or keys are hard errors so that a typo in a sweep file never
silently falls back to a default.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


STAGES = [
    "gen-data",
    "train-denoiser",
    "eval-dc",
    "eval-ensemble",
    "train-noop",
    "eval-noop",
    "train-prompt",
    "transfer",
    "instability",
    "spectra",
    "stats",
    "probe",
    "report",
]


@dataclass
class DataConfig:
    generator: str = "shapes"
    n_per_class: int = 200
    size: int = 16
    seed: int = 1
    shots: int = 16


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class DenoiserConfig:
    n_per_class: int = 200
    data_seed: int = 100
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    base_channels: int = 16
    emb_dim: int = 32


@dataclass
class DCConfig:
    t: int = 500
    eval_seeds: List[int] = field(default_factory=lambda: list(range(10)))
    ensemble_noises: int = 5
    ensemble_seeds: List[int] = field(default_factory=lambda: list(range(10)))
    ensemble_timesteps: List[int] = field(default_factory=lambda: [300, 400, 500, 600, 700])
    timestep_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class NoOpConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_eps: float = 1e-2
    lr_meta: float = 1e-3
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    meta_channels: List[int] = field(default_factory=lambda: [8, 16, 32])


@dataclass
class PromptConfig:
    n_tokens: int = 1
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 32


@dataclass
class TransferConfig:
    generator: str = "shapes"
    variant: str = "shifted"
    n_per_class: int = 100
    seed: int = 2


@dataclass
class SpectraConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 20
    cutoff: float = 0.3
    timesteps: List[int] = field(default_factory=list)  # empty: dc.t only


@dataclass
class StatsConfig:
    draws: int = 100
    seed: int = 12345


@dataclass
class ProbeConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 5e-3
    clean_fraction: float = 0.5
    t: int = 500
    noise_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    precision: str = "float32"
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    dc: DCConfig = field(default_factory=DCConfig)
    noop: NoOpConfig = field(default_factory=NoOpConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    spectra: SpectraConfig = field(default_factory=SpectraConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig) if f.name in (
    "data", "schedule", "denoiser", "dc", "noop", "prompt", "transfer", "spectra", "stats", "probe")}


def _coerce(where: str, value, default):
    """Match the TOML value to the default's type; ints may stand in for floats."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        proto = default[0] if default else 0
        return [_coerce(f"{where}[{i}]", v, proto) for i, v in enumerate(value)]
    raise ConfigError(f"{where}: unsupported value {value!r}")  # pragma: no cover


def _fill(obj, raw: dict, where: str):
    known = {f.name for f in fields(obj)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}{key!r}")
        setattr(obj, key, _coerce(f"{where}{key}", value, getattr(obj, key)))
    return obj


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            _fill(getattr(cfg, key), value, f"{key}.")
        elif key in ("name", "seed", "precision", "stages"):
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        else:
            raise ConfigError(f"unknown key {key!r}")
    validate(cfg)
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def apply_overrides(cfg: RunConfig, overrides: List[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as TOML literals)."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {text}")["v"]
        except tomllib.TOMLDecodeError:
            value = text  # bare words are strings
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {key!r}")
        node[parts[-1]] = value
    return from_dict(raw)


def _need(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> None:
    from ..datasets import GENERATORS

    _need(bool(cfg.name) and all(c.isalnum() or c in "-_." for c in cfg.name),
          f"name must be nonempty and use [A-Za-z0-9._-], got {cfg.name!r}")
    _need(cfg.precision in ("float32", "float64"), f"precision must be float32 or float64, got {cfg.precision!r}")
    for s in cfg.stages:
        _need(s in STAGES, f"unknown stage {s!r}")
    d = cfg.data
    _need(d.generator in GENERATORS, f"unknown generator {d.generator!r}")
    _need(d.n_per_class >= 2 and d.size >= 8 and d.size % 8 == 0, "data: n_per_class >= 2, size a multiple of 8")
    _need(1 <= d.shots < d.n_per_class, "data.shots must lie in [1, n_per_class)")
    s = cfg.schedule
    _need(s.T >= 1 and 0 < s.beta_start <= s.beta_end < 1, "schedule: need T >= 1 and 0 < beta_start <= beta_end < 1")
    dn = cfg.denoiser
    _need(dn.epochs >= 0 and dn.batch_size >= 1 and dn.lr > 0 and dn.n_per_class >= 1, "denoiser: invalid training values")
    _need(dn.base_channels >= 1 and dn.emb_dim >= 2 and dn.emb_dim % 2 == 0, "denoiser: invalid width")
    dc = cfg.dc
    for t in [dc.t, cfg.probe.t, *dc.ensemble_timesteps, *cfg.spectra.timesteps]:
        _need(1 <= t <= s.T, f"timestep {t} outside [1, {s.T}]")
    _need(len(dc.eval_seeds) >= 1 and dc.ensemble_noises >= 1 and len(dc.ensemble_timesteps) >= 1,
          "dc: seeds, noises and timesteps must be nonempty")
    n = cfg.noop
    _need(n.epochs >= 0 and n.batch_size >= 1 and n.lr_eps > 0 and n.lr_meta > 0 and len(n.seeds) >= 1,
          "noop: invalid training values")
    _need(len(n.meta_channels) == 3 and all(c >= 1 for c in n.meta_channels), "noop.meta_channels needs 3 widths")
    p = cfg.prompt
    _need(p.n_tokens >= 1 and p.lr > 0 and p.epochs >= 0 and p.batch_size >= 1, "prompt: invalid values")
    tr = cfg.transfer
    _need(tr.generator in GENERATORS and tr.n_per_class >= 1, "transfer: invalid values")
    sp = cfg.spectra
    _need(0 < sp.cutoff < 1 and sp.epochs >= 0, "spectra: invalid values")
    _need(cfg.stats.draws >= 1, "stats.draws must be >= 1")
    pr = cfg.probe
    _need(pr.epochs >= 1 and pr.lr > 0 and pr.batch_size >= 1 and 0 <= pr.clean_fraction <= 1,
          "probe: invalid values")
