"""Pipeline configuration: YAML files layered over named presets.

Resolution order is preset, then file, then environment variables named
``MEASCASCADE_<SECTION>__<KEY>`` (values parsed as YAML scalars).
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .quantity_tagger import TaggerHyper
from .spanqa import QaHyper
from .synthgen import GrammarSpec
from .unitmods import DEFAULT_LABELS, UnitModsHyper

ENV_PREFIX = "MEASCASCADE_"


@dataclass
class Paths:
    train: Optional[str] = None         # corpus dir or TSV
    dev: Optional[str] = None           # optional; otherwise split off train
    checkpoints: str = "checkpoints"
    embeddings: Optional[str] = None


@dataclass
class SynthSettings:
    n_train: int = 300
    n_dev: int = 40
    n_test: int = 40
    seed: int = 7


@dataclass
class PipelineConfig:
    seed: int = 7
    max_len: int = 512
    paths: Paths = field(default_factory=Paths)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    qa_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantity: TaggerHyper = field(default_factory=TaggerHyper)
    unitmods: UnitModsHyper = field(default_factory=UnitModsHyper)
    qa: QaHyper = field(default_factory=QaHyper)
    synth: SynthSettings = field(default_factory=SynthSettings)
    preset: str = "scratch-defaults"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unitmods"]["labels"] = list(self.unitmods.labels)
        return d

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True))

    def check(self) -> None:
        try:
            self.encoder.check()
            self.qa_encoder.check()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.qa_encoder.kind != "bilstm":
            raise ConfigError("qa_encoder must be the trainable bilstm encoder")
        positive = [("max_len", self.max_len), ("quantity.lr", self.quantity.lr),
                    ("quantity.batch_size", self.quantity.batch_size),
                    ("unitmods.lr", self.unitmods.lr), ("unitmods.batch_size", self.unitmods.batch_size),
                    ("unitmods.hidden", self.unitmods.hidden), ("qa.lr", self.qa.lr),
                    ("qa.batch_size", self.qa.batch_size), ("qa.max_answer_len", self.qa.max_answer_len)]
        for name, value in positive:
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value!r}")
        for name, value in (("quantity.epochs", self.quantity.epochs),
                            ("unitmods.epochs", self.unitmods.epochs), ("qa.epochs", self.qa.epochs)):
            if value < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.unitmods.labels:
            raise ConfigError("unitmods.labels must not be empty")
        if self.qa.context_window is not None and self.qa.context_window < 1:
            raise ConfigError("qa.context_window must be positive or null")


# Hyperparameters reported for the original system; lr 2e-5 and batch 8 are
# fine-tuning settings for pretrained encoders.
PAPER_DEFAULTS = {
    "max_len": 512,
    "quantity": {"epochs": 10, "lr": 2e-5, "batch_size": 8},
    "unitmods": {"epochs": 25, "lr": 1e-4, "batch_size": 16, "hidden": 64, "char_embed_dim": 32,
                 "layers": 2, "shared_trunk": False},
    "qa": {"epochs": 10, "lr": 2e-5, "batch_size": 8, "context_window": None},
}

# Desk-scale settings for encoders trained from scratch on one CPU.
SCRATCH_DEFAULTS = {
    "max_len": 512,
    "encoder": {"token_hidden": 128},
    "qa_encoder": {"token_hidden": 64},
    "quantity": {"epochs": 10, "lr": 1e-3, "batch_size": 8},
    "unitmods": {"epochs": 25, "lr": 1e-3, "batch_size": 16, "hidden": 64, "char_embed_dim": 32,
                 "layers": 2, "shared_trunk": False},
    "qa": {"epochs": 5, "lr": 1e-3, "batch_size": 16, "context_window": 24},
}

PRESETS = {"paper-defaults": PAPER_DEFAULTS, "scratch-defaults": SCRATCH_DEFAULTS}

_SECTIONS = {"paths": Paths, "encoder": EncoderConfig, "qa_encoder": EncoderConfig,
             "quantity": TaggerHyper, "unitmods": UnitModsHyper, "qa": QaHyper, "synth": SynthSettings}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _env_overrides(environ) -> dict:
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def _build(section: str, cls, values: Any):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    try:
        obj = cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad values in {section!r}: {exc}") from exc
    for name in ("labels", "quantities_per_doc"):
        if isinstance(getattr(obj, name, None), list):
            setattr(obj, name, tuple(getattr(obj, name)))
    return obj


def from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    preset = data.pop("preset", "scratch-defaults")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose one of {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], data)
    unknown = set(merged) - set(_SECTIONS) - {"seed", "max_len"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {name: _build(name, cls, merged.get(name)) for name, cls in _SECTIONS.items()}
    cfg = PipelineConfig(seed=merged.get("seed", 7), max_len=merged.get("max_len", 512), preset=preset,
                         **kwargs)
    cfg.quantity.max_len = cfg.qa.max_len = cfg.max_len
    if cfg.paths.embeddings and cfg.encoder.kind == "precomputed":
        cfg.encoder.embedding_dir = cfg.paths.embeddings
    cfg.check()
    return cfg


def load_config(path: Optional[str | Path] = None, environ=None) -> PipelineConfig:
    """Read a YAML config (or just the preset when ``path`` is None) plus env overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = _merge(data, _env_overrides(os.environ if environ is None else environ))
    cfg = from_dict(data)
    if path is not None:
        # relative paths are taken relative to the config file, so a config
        # directory can be moved or copied as a unit
        base = Path(path).resolve().parent
        for name in ("train", "dev", "checkpoints", "embeddings"):
            value = getattr(cfg.paths, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg.paths, name, str(base / value))
        if cfg.encoder.kind == "precomputed" and cfg.paths.embeddings:
            cfg.encoder.embedding_dir = cfg.paths.embeddings
    return cfg


def preset_config(name: str = "scratch-defaults", **overrides) -> PipelineConfig:
    return from_dict(_merge({"preset": name}, overrides))


def grammar_for(cfg: PipelineConfig) -> GrammarSpec:
    return GrammarSpec(seed=cfg.synth.seed)


__all__ = ["PipelineConfig", "Paths", "SynthSettings", "PRESETS", "load_config", "from_dict",
           "preset_config", "grammar_for", "DEFAULT_LABELS", "ENV_PREFIX"]
