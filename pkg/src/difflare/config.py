"""Run configuration: one YAML document with a section per stage.

Unknown keys are rejected at load time. ``resolve`` applies ``section.key=value``
overrides and returns a fresh :class:`RunConfig`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError


@dataclass
class CorpusConfig:
    crop_size: int = 64
    background_size: int = 80
    corpus_dir: Optional[str] = None
    n_train_backgrounds: int = 600
    n_test_backgrounds: int = 32
    samples_per_background: int = 1
    n_scattering: int = 32
    n_reflective: int = 32
    rotation_deg: tuple = (0.0, 360.0)
    scale: tuple = (0.8, 1.5)
    translate_frac: float = 0.25
    flip_prob: float = 0.5
    flare_gain: tuple = (0.8, 3.0)
    test_fraction: float = 0.1  # folder-backed corpora only


@dataclass
class VQConfig:
    base_width: int = 16
    latent_channels: int = 4
    downsample: int = 4
    codebook_size: int = 256
    commitment: float = 0.25
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    n_train_images: int = 1200
    n_val_images: int = 32
    restart_every: int = 200


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    widths: tuple = (32, 64, 64)
    vocab_size: int = 16
    clean_token: int = 1
    cond_dropout: float = 0.1
    x0_clip: float = 6.0
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    n_train_images: int = 1200
    n_val_images: int = 64


@dataclass
class SGIMConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    n_val_pairs: int = 64


@dataclass
class AFFMConfig:
    m: int = 2
    n: int = 2
    attention_heads: int = 1
    attention_layers: int = 1
    width: int = 64
    growth: int = 32
    mask_mode: str = "multiply"
    fidelity_weight: float = 1.0
    lgp_threshold: float = 0.45  # chosen on training-split flare statistics
    steps: int = 1500
    batch_size: int = 16
    lr: float = 5e-4
    n_train_pairs: int = 384
    n_val_pairs: int = 32
    variants: tuple = ("full", "unguided")


@dataclass
class InferConfig:
    guidance_scale: float = 0.0
    prompt_token: Optional[int] = None
    lgp_threshold: float = 0.45  # chosen on training-split flare statistics
    gradient_dilation: int = 0
    batch_size: int = 32


@dataclass
class EvalConfig:
    n_images: int = 32
    variants: tuple = ("input", "no-affm", "unguided-affm", "full")
    panels: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out: Optional[str] = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sgim: SGIMConfig = field(default_factory=SGIMConfig)
    affm: AFFMConfig = field(default_factory=AFFMConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self, *sections) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        return Path(os.environ.get("DIFFLARE_HOME", "difflare_runs"))


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "vq": VQConfig,
    "diffusion": DiffusionConfig,
    "sgim": SGIMConfig,
    "affm": AFFMConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(section_cls, key, value):
    default = next(f for f in dataclasses.fields(section_cls) if f.name == key)
    ref = getattr(section_cls(), key)
    if isinstance(ref, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section_cls.__name__}.{key} expects a list")
        return tuple(value)
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a bool")
        return value
    if isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key} expects an int, got {value!r}")
        return value
    if isinstance(ref, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if "Optional[int]" in str(default.type) and value is not None:
        if not isinstance(value, int):
            raise ConfigError(f"{key} expects an int or null")
    return value


def from_dict(data: dict) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            cls = _SECTION_TYPES[key]
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(value) - names
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs = {k: _coerce(cls, k, v) for k, v in value.items()}
            setattr(cfg, key, dataclasses.replace(getattr(cfg, key), **kwargs))
        elif key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an int")
            cfg.seed = value
        else:
            cfg.out = None if value is None else str(value)
    return cfg


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return from_dict(data)


def resolve(cfg: RunConfig, overrides=()) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = path.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in override {path!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key in override {path!r}")
        node[parts[-1]] = value
    return from_dict(data)


def dump(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def ci_profile() -> RunConfig:
    """Smaller widths and budgets for quick test runs."""
    return from_dict(
        {
            "corpus": {"n_train_backgrounds": 200, "n_test_backgrounds": 16},
            "vq": {"steps": 400, "n_train_images": 256, "n_val_images": 16},
            "diffusion": {"widths": [16, 32, 32], "steps": 200, "n_train_images": 256, "n_val_images": 16},
            "sgim": {"steps": 100, "n_val_pairs": 16},
            "affm": {"width": 16, "growth": 8, "steps": 100, "n_train_pairs": 32, "n_val_pairs": 8},
            "eval": {"n_images": 8},
        }
    )
