"""Pipeline configuration: one INI section per module config.

Keys match the dataclass field names.  Tuples are written comma-separated,
floats with ``repr`` so a written config reads back identically.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from voxelseg.augment import AugmentConfig
from voxelseg.errors import ConfigError
from voxelseg.patch_engine import PatchGridConfig
from voxelseg.phantom import PhantomSpec
from voxelseg.preprocess import PreprocessConfig
from voxelseg.training import TrainConfig
from voxelseg.unet3d import UNetConfig


@dataclass(frozen=True)
class EvalConfig:
    overlay_axis: int = 2
    overlay_slices: int = 1  # evenly spaced slices per sample; 0 disables overlays
    save_probabilities: bool = False

    def __post_init__(self):
        if self.overlay_axis not in (0, 1, 2):
            raise ConfigError("overlay_axis must be 0, 1 or 2")
        if self.overlay_slices < 0:
            raise ConfigError("overlay_slices must be >= 0")


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    cache: str = "cache"
    out: str = "runs"


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    patch: PatchGridConfig = field(default_factory=PatchGridConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    seed: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.patch.batch_size != self.train.batch_size:
            raise ConfigError(f"patch.batch_size ({self.patch.batch_size}) and train.batch_size "
                              f"({self.train.batch_size}) disagree")
        if any(p % self.model.divisor for p in self.patch.patch_shape):
            raise ConfigError(f"patch_shape {self.patch.patch_shape} must be divisible by "
                              f"{self.model.divisor} for {self.model.num_levels} levels")

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, seed: int | None = None, max_epochs: int | None = None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        if max_epochs is not None:
            cfg = cfg.replace(train=dataclasses.replace(cfg.train, max_epochs=max_epochs))
        return cfg


SECTIONS = ("preprocess", "augment", "patch", "model", "train", "eval", "paths", "phantom")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",")]
            kind = type(default[0]) if default else int
            return tuple(kind(float(p)) if kind is int and float(p).is_integer() else kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {text!r} as {type(default).__name__}") from exc


def _section_from(cls, items: dict[str, str], name: str):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _parse(v, getattr(defaults, k), f"{name}.{k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_parser(parser: configparser.ConfigParser, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    unknown = set(parser.sections()) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name in SECTIONS:
        current = getattr(base, name)
        items = {f.name: _format(getattr(current, f.name)) for f in dataclasses.fields(current)}
        if parser.has_section(name):
            items.update(parser.items(name))
        sections[name] = _section_from(type(current), items, name)
    seed = base.seed
    if parser.has_section("seed"):
        seed = _parse(parser.get("seed", "value", fallback=str(seed)), 0, "seed.value")
    return PipelineConfig(seed=seed, **sections)


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str  # keep key case
    return p


def loads(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    p = _parser()
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_parser(p, base)


def load(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def dumps(cfg: PipelineConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format(getattr(section, f.name))}" for f in dataclasses.fields(section)]
        lines.append("")
    lines += ["[seed]", f"value = {cfg.seed}", ""]
    return "\n".join(lines)


def write_resolved(cfg: PipelineConfig, directory) -> Path:
    path = Path(directory) / "config.resolved"
    path.write_text(dumps(cfg))
    return path


def desk() -> PipelineConfig:
    """Laptop-scale settings for the synthetic phantom task."""
    return PipelineConfig(
        patch=PatchGridConfig(patch_shape=(32, 32, 16), overlap=(16, 16, 8), batch_size=2),
        model=UNetConfig(base_filters=4, num_levels=3),
        train=TrainConfig(max_epochs=60, batches_per_epoch=20),
    )


def full() -> PipelineConfig:
    """Full-scale settings: every module default."""
    return PipelineConfig()


PRESETS = {"desk": desk, "full": full}


def resolve(spec: str | None) -> PipelineConfig:
    """A preset name, a config file path, or ``None`` for the desk preset."""
    if spec is None:
        return desk()
    if spec in PRESETS:
        return PRESETS[spec]()
    return load(spec)
