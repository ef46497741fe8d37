"""Experiment configuration: a sectioned key-value file, parsed and fully
validated before any compute happens."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .data import KINDS, DomainDataset, SynthTransformSpec, load_image_dir, synth_build
from .errors import ConfigError
from .training import TrainingConfig

METRIC_NAMES = ("gap", "psnr", "cls_error", "fid")
EVAL_SEED_OFFSET = 1_000_003

_TRAINING_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}


@dataclass
class ExperimentSettings:
    name: str = "run"
    out: str = "runs"
    checkpoint_every: int = 500
    metrics: tuple = ("gap", "psnr")
    classifier_steps: int = 300


@dataclass
class DomainSource:
    domain: int
    transform: SynthTransformSpec | None = None
    path: str | None = None
    eval_path: str | None = None


@dataclass
class DatasetSettings:
    source: str = "synthetic"
    image_size: int = 32
    channels: int = 3
    train_count: int = 64
    eval_count: int = 32
    seed: int = 0
    domains: dict[int, DomainSource] = field(default_factory=dict)

    @property
    def image_shape(self) -> tuple:
        return (self.channels, self.image_size, self.image_size)


_EXPERIMENT_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentSettings)}
_DATASET_FIELDS = {f.name: f for f in dataclasses.fields(DatasetSettings) if f.name != "domains"}
_SYNTH_FIELDS = {f.name: f for f in dataclasses.fields(SynthTransformSpec)}
_SECTION_FIELDS = {"experiment": _EXPERIMENT_FIELDS, "training": _TRAINING_FIELDS, "dataset": _DATASET_FIELDS}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSettings
    training: TrainingConfig
    dataset: DatasetSettings

    @property
    def run_dir(self) -> Path:
        return Path(self.experiment.out) / self.experiment.name

    def validate(self) -> None:
        self.training.validate()
        e, d = self.experiment, self.dataset
        if not e.name or "/" in e.name:
            raise ConfigError(f"experiment.name must be a plain directory name, got {e.name!r}")
        unknown = set(e.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ConfigError(f"experiment.metrics: unknown metrics {sorted(unknown)}; known {METRIC_NAMES}")
        if e.checkpoint_every < 1 or e.checkpoint_every % self.training.eval_every:
            raise ConfigError(f"experiment.checkpoint_every ({e.checkpoint_every}) must be a positive "
                              f"multiple of training.eval_every ({self.training.eval_every})")
        if d.source not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {d.source!r}")
        if d.image_size < 8 or d.image_size % 8:
            raise ConfigError(f"dataset.image_size must be a multiple of 8, got {d.image_size}")
        if d.train_count < 1 or d.eval_count < 2:
            raise ConfigError("dataset.train_count must be >= 1 and dataset.eval_count >= 2")
        wanted = self.training.all_domains
        if sorted(d.domains) != sorted(wanted):
            raise ConfigError(f"dataset needs [domain.N] sections for exactly {wanted}, got {sorted(d.domains)}")
        for dom, src in d.domains.items():
            if d.source == "synthetic":
                if src.transform is None:
                    raise ConfigError(f"domain.{dom}: synthetic domains need a 'kind'")
                src.transform.validate(d.channels)
            else:
                if not src.path:
                    raise ConfigError(f"domain.{dom}: directory datasets need a 'path'")
                for p in (src.path, src.eval_path):
                    if p and not Path(p).is_dir():
                        raise ConfigError(f"domain.{dom}: dataset directory {p} does not exist")

    # ------------------------------------------------------------ data

    def build_datasets(self) -> tuple[dict[int, DomainDataset], dict[int, DomainDataset]]:
        """(training sets, held-out evaluation sets)."""
        d = self.dataset
        if d.source == "synthetic":
            specs = {n: s.transform for n, s in d.domains.items()}
            train = synth_build(d.train_count, d.image_shape, specs, d.seed)
            held = synth_build(d.eval_count, d.image_shape, specs, d.seed + EVAL_SEED_OFFSET)
            return train, held
        train = {n: load_image_dir(s.path, d.image_shape, n) for n, s in d.domains.items()}
        held = {n: load_image_dir(s.eval_path, d.image_shape, n) if s.eval_path else train[n]
                for n, s in d.domains.items()}
        return train, held

    # ------------------------------------------------------------ snapshot

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser(interpolation=None)
        for section, obj in (("experiment", self.experiment), ("training", self.training), ("dataset", self.dataset)):
            cp[section] = {name: _format(getattr(obj, name)) for name in _SECTION_FIELDS[section]}
        for n, src in sorted(self.dataset.domains.items()):
            sec = {}
            if src.transform is not None:
                sec.update({name: _format(getattr(src.transform, name)) for name in _SYNTH_FIELDS})
            if src.path:
                sec["path"] = src.path
            if src.eval_path:
                sec["eval_path"] = src.eval_path
            cp[f"domain.{n}"] = sec
        return cp

    def snapshot_text(self) -> str:
        cp = self.to_parser()
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, key: str, raw: str, f: dataclasses.Field):
    where = f"{section}.{key}"
    raw = raw.strip()
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if key == "auxiliary_domain":
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if key == "permutation" else tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_section(cls, fields: Mapping[str, dataclasses.Field], section: str, values: Mapping[str, str]):
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown key; allowed {sorted(fields)}")
        kwargs[key] = _parse(section, key, raw, fields[key])
    return cls(**kwargs)


def _build_domain(n: int, values: Mapping[str, str]) -> DomainSource:
    section = f"domain.{n}"
    values = dict(values)
    path, eval_path = values.pop("path", None), values.pop("eval_path", None)
    transform = None
    if values:
        if "kind" not in values:
            raise ConfigError(f"{section}: synthetic domains need a 'kind' (one of {KINDS})")
        transform = _build_section(SynthTransformSpec, _SYNTH_FIELDS, section, values)
    return DomainSource(n, transform, path, eval_path)


def resolve_override(item: str) -> tuple[str, str, str]:
    """``section.key=value`` or bare ``key=value`` to (section, key, value)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    key = key.strip()
    if "." in key:
        section, name = key.rsplit(".", 1)
        return section, name, value
    for section in ("training", "experiment", "dataset"):
        if key in _SECTION_FIELDS[section]:
            return section, key, value
    raise ConfigError(f"override {key!r}: unknown key")


def config_from_mapping(sections: Mapping[str, Mapping[str, str]]) -> ExperimentConfig:
    sections = {k: dict(v) for k, v in sections.items() if k != "DEFAULT"}
    domains = {}
    for name in list(sections):
        if name.startswith("domain."):
            try:
                n = int(name.split(".", 1)[1])
            except ValueError:
                raise ConfigError(f"section [{name}]: domain sections must be [domain.<integer id>]") from None
            domains[n] = _build_domain(n, sections.pop(name))
        elif name not in _SECTION_FIELDS:
            raise ConfigError(f"unknown section [{name}]")
    cfg = ExperimentConfig(
        _build_section(ExperimentSettings, _EXPERIMENT_FIELDS, "experiment", sections.get("experiment", {})),
        _build_section(TrainingConfig, _TRAINING_FIELDS, "training", sections.get("training", {})),
        _build_section(DatasetSettings, _DATASET_FIELDS, "dataset", sections.get("dataset", {})),
    )
    cfg.dataset.domains = domains
    cfg.validate()
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    sections = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides:
        section, key, value = resolve_override(item)
        sections.setdefault(section, {})[key] = value
    return config_from_mapping(sections)
