"""Experiment configuration: INI-style files with fixed sections and keys."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .segnet import BlockKind, NetConfig
from .synthdata import MAX_DOMAINS, MIN_PER_DOMAIN

METHODS = ("fedavg-baseline", "mla-only", "bin-only", "mla-bin")
GRANULARITIES = ("batch", "image", "dataset")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    domains: int = 4
    per_domain: int = 60
    image_size: int = 32
    test_fraction: float = 1 / 3
    structures: int = 1


@dataclass(frozen=True)
class NetSection:
    levels: int = 4
    base_channels: int = 8
    bin_depth: int = 3
    block_kind: str = "bin"


@dataclass(frozen=True)
class FederationSection:
    rounds: int = 60
    epochs_per_round: int = 1
    batch_size: int = 8
    lr: float = 0.01
    lr_step: int = 100
    lr_factor: float = 0.8


@dataclass(frozen=True)
class MlaSection:
    dam_epochs: int = 100
    dam_lr: float = 0.001
    dam_hidden: int = 64
    dam_batch_size: int = 8
    granularity: str = "batch"
    eval_batch_size: int = 8
    extractor_levels: int = 3
    extractor_base_channels: int = 8


@dataclass(frozen=True)
class RunSection:
    method: str = "mla-bin"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "results"
    threads: int = 1
    unseen: Tuple[int, ...] = ()  # empty means every domain in turn


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    federation: FederationSection = field(default_factory=FederationSection)
    mla: MlaSection = field(default_factory=MlaSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        validate(self)

    def net_config(self, bin_depth: Optional[int] = None, block_kind: Optional[str] = None) -> NetConfig:
        return NetConfig(levels=self.net.levels, base_channels=self.net.base_channels,
                         bin_depth=self.net.bin_depth if bin_depth is None else bin_depth,
                         block_kind=BlockKind(block_kind or self.net.block_kind),
                         out_channels=self.data.structures)

    def unseen_domains(self) -> List[int]:
        return list(self.run.unseen) if self.run.unseen else list(range(self.data.domains))

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(run={"seeds": (1,)})`` returns a validated copy."""
        parts = {name: replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return replace(self, **parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build({sec: {k: str_value(v) for k, v in vals.items()} for sec, vals in d.items()})


_SECTIONS = {"data": DataSection, "net": NetSection, "federation": FederationSection,
             "mla": MlaSection, "run": RunSection}


def str_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(cls, key: str, raw: str):
    default = getattr(cls(), key)
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{cls.__name__}.{key}: cannot parse {raw!r}") from exc
    return raw.strip()


def _build(raw: dict) -> ExperimentConfig:
    parts = {}
    for sec, values in raw.items():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = _SECTIONS[sec]
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(unknown)}")
        parts[sec] = cls(**{k: _parse(cls, k, v) for k, v in values.items()})
    return ExperimentConfig(**parts)


def load_config(path: Union[str, Path, None] = None, text: Optional[str] = None) -> ExperimentConfig:
    """Read a config file (or text); missing keys take their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser.read(p)
    return _build({sec: dict(parser[sec]) for sec in parser.sections()})


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, vals in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {str_value(v)}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    d, n, f, m, r = cfg.data, cfg.net, cfg.federation, cfg.mla, cfg.run
    _require(3 <= d.domains <= MAX_DOMAINS, f"data.domains must lie in [3, {MAX_DOMAINS}] (>= 2 seen domains)")
    _require(d.per_domain >= MIN_PER_DOMAIN, f"data.per_domain must be >= {MIN_PER_DOMAIN}")
    _require(0.0 < d.test_fraction < 1.0, "data.test_fraction must lie in (0, 1)")
    _require(d.structures in (1, 2), "data.structures must be 1 or 2")
    _require(n.levels >= 1 and n.base_channels >= 1, "net.levels and net.base_channels must be positive")
    _require(0 <= n.bin_depth <= n.levels, "net.bin_depth must lie in [0, net.levels]")
    _require(n.block_kind in {k.value for k in BlockKind}, f"net.block_kind must be one of plain, bin, ibn")
    mult = 2 ** (n.levels - 1)
    _require(d.image_size >= mult and d.image_size % mult == 0,
             f"data.image_size {d.image_size} must be divisible by 2^(levels-1) = {mult}")
    _require(f.rounds >= 0 and f.epochs_per_round >= 0 and f.batch_size >= 1, "invalid federation sizes")
    _require(f.lr > 0 and f.lr_step >= 1 and 0 < f.lr_factor <= 1, "invalid learning-rate schedule")
    _require(m.dam_epochs >= 1 and m.dam_lr > 0 and m.dam_hidden >= 1 and m.dam_batch_size >= 1,
             "invalid DAM settings")
    _require(m.granularity in GRANULARITIES, f"mla.granularity must be one of {', '.join(GRANULARITIES)}")
    _require(m.eval_batch_size >= 1 and m.extractor_levels >= 1 and m.extractor_base_channels >= 1,
             "invalid MLA extractor or evaluation settings")
    _require(d.image_size % 2 ** (m.extractor_levels - 1) == 0,
             "data.image_size must be divisible by 2^(mla.extractor_levels-1)")
    _require(r.method in METHODS, f"run.method must be one of {', '.join(METHODS)}")
    _require(len(r.seeds) > 0, "run.seeds must not be empty")
    _require(all(s >= 0 for s in r.seeds), "run.seeds must be non-negative")
    _require(r.threads >= 1, "run.threads must be >= 1")
    _require(all(0 <= u < d.domains for u in r.unseen), "run.unseen indices out of range")
