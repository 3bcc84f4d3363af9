"""Run configuration: schema, presets, YAML loading and fingerprinting.

Every field carries a ``source`` note in its metadata so ``dpat defaults``
can print where each default comes from.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigurationError

ABLATIONS = ("temporal-adapter", "all-adapters", "agnostic-prefix", "all-prefixes")
MODES = ("dpat", "joint", "dualprompt-loss")
PRESETS = ("desk", "paper-geometry")


def _f(default, source, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: copy.deepcopy(default), metadata={"source": source}, **kw)
    return field(default=default, metadata={"source": source}, **kw)


@dataclass
class ModelConfig:
    blocks: int = _f(6, "decision: desk-scale 6-block backbone (keeps reference prompt layers 1-5 valid)")
    dim: int = _f(32, "decision: desk-scale embedding width")
    heads: int = _f(4, "decision: desk-scale head count")
    mlp_ratio: float = _f(4.0, "ViT convention")
    patch: int = _f(8, "decision: desk geometry patch 8")
    frames: int = _f(8, "decision: desk geometry T=8 (paper-geometry preset: 16 frames)")
    height: int = _f(32, "decision: desk geometry 32x32")
    width: int = _f(32, "decision: desk geometry 32x32")
    channels: int = _f(3, "RGB frames")
    adapter_ratio: float = _f(0.25, "reference setting: bottleneck ratio 0.25")
    adapter_up_init_std: float = _f(0.02, "decision: small random up-projection (zero-init gives dead stage-1 prompt gradients on task 1)")
    feedforward: bool = _f(True, "decision: keep frozen feed-forward sublayer after the spatial pass")
    temporal_pos_embed: bool = _f(False, "decision: no temporal position embedding by default")
    pretrain_steps: int = _f(400, "decision: desk stand-in for image pretraining (static-frame shape classification)")
    backbone_seed: int = _f(0, "decision: fixed stand-in for pretrained weights, independent of run seed")
    dtype: str = _f("float32", "decision: float32 runs, float64 for gradient checks")


@dataclass
class PromptConfig:
    # Lengths count prepended key positions; each prompt tensor stores 2 * length rows (key half + value half).
    agnostic_length: int = _f(20, "reference setting: task-agnostic prompt length 20 (per key/value half)")
    specific_length: int = _f(5, "reference setting: task-specific prompt length 5 (per key/value half)")
    agnostic_layers: list = _f([1, 2], "reference setting: first two blocks")
    specific_layers: list = _f([3, 5], "reference setting: third through fifth blocks")


@dataclass
class TrainConfig:
    batch_size: int = _f(64, "reference setting: batch size 64")
    epochs: int = _f(50, "reference setting: 50 epochs per stage")
    prompt_lr: float = _f(1e-3, "reference setting: prompt-tuning lr 1e-3")
    adapter_lr: float = _f(3e-4, "reference setting: adapter-tuning lr 3e-4")
    match_weight: float = _f(1.0, "reference setting: matching-loss weight 1")
    tau: float = _f(0.1, "reference setting: matching temperature 0.1")
    cosine_schedule: bool = _f(True, "reference setting: cosine decay schedule")
    mode: str = _f("dpat", "decision: dpat | joint | dualprompt-loss")
    ablate: Optional[str] = _f(None, "decision: one of the component ablation rows or none")


@dataclass
class DataConfig:
    dataset: str = _f("sprites", "decision: synthetic moving-sprite benchmark ('sprites') or a frame-folder path")
    tasks: int = _f(4, "decision: 4-task desk stream (reference setting: 10 tasks)")
    shapes: int = _f(4, "decision: 4 sprite shapes")
    motions: int = _f(4, "decision: 4 translation motions")
    train_per_class: int = _f(32, "decision: desk-scale sample count")
    test_per_class: int = _f(16, "decision: desk-scale sample count")
    sprite_size: int = _f(10, "decision: desk-scale sprite")
    speed: int = _f(2, "decision: pixels per frame")
    noise: float = _f(0.05, "decision: additive pixel noise")
    test_fraction: float = _f(0.25, "decision: held-out share for folder datasets")


@dataclass
class Config:
    seed: int = _f(0, "decision: run seed (stream partition, init, shuffling)")
    model: ModelConfig = field(default_factory=ModelConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "Config":
        problems = validate(self)
        if problems:
            raise ConfigurationError("; ".join(problems))
        return self


_SECTIONS = {"model": ModelConfig, "prompts": PromptConfig, "train": TrainConfig, "data": DataConfig}

PRESET_OVERRIDES = {
    "desk": {
        "train": {"batch_size": 32, "epochs": 15, "prompt_lr": 1e-2, "adapter_lr": 3e-3},
        "model": {"temporal_pos_embed": True, "adapter_up_init_std": 0.3},
    },
    "paper-geometry": {
        "model": {
            "blocks": 12, "dim": 768, "heads": 12, "patch": 16, "frames": 16,
            "height": 224, "width": 224,
        },
        "data": {"tasks": 10},
    },
}


def validate(cfg: Config) -> list[str]:
    """Return a list of human-readable schema problems (empty when valid)."""
    out = []
    m, p, t, d = cfg.model, cfg.prompts, cfg.train, cfg.data
    for name in ("blocks", "dim", "heads", "patch", "frames", "height", "width", "channels"):
        if not isinstance(getattr(m, name), int) or getattr(m, name) < 1:
            out.append(f"model.{name} must be a positive integer")
    if not out:
        if m.dim % m.heads:
            out.append("model.dim must be divisible by model.heads")
        if m.height % m.patch or m.width % m.patch:
            out.append("model.height and model.width must be divisible by model.patch")
    if not 0 < m.adapter_ratio <= 1:
        out.append("model.adapter_ratio must lie in (0, 1]")
    if m.dtype not in ("float32", "float64"):
        out.append("model.dtype must be float32 or float64")
    for name in ("agnostic_length", "specific_length"):
        v = getattr(p, name)
        if not isinstance(v, int) or v < 0:
            out.append(f"prompts.{name} must be a non-negative integer")
    for name in ("agnostic_layers", "specific_layers"):
        v = getattr(p, name)
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(i, int) for i in v)):
            out.append(f"prompts.{name} must be [start, end]")
        elif not 1 <= v[0] <= v[1] <= m.blocks:
            out.append(f"prompts.{name} must satisfy 1 <= start <= end <= model.blocks")
    if not out:
        ga, gb = p.agnostic_layers
        ea, eb = p.specific_layers
        if ga <= eb and ea <= gb:
            out.append("prompts.agnostic_layers and prompts.specific_layers overlap")
    if t.batch_size < 1 or t.epochs < 0:
        out.append("train.batch_size must be >= 1 and train.epochs >= 0")
    if t.tau <= 0:
        out.append("train.tau must be positive")
    if t.match_weight < 0:
        out.append("train.match_weight must be non-negative")
    if t.mode not in MODES:
        out.append(f"train.mode must be one of {MODES}")
    if t.ablate is not None and t.ablate not in ABLATIONS:
        out.append(f"train.ablate must be one of {ABLATIONS} or null")
    if t.ablate == "all-prefixes" and t.mode == "dualprompt-loss":
        out.append("train.ablate=all-prefixes cannot be combined with mode=dualprompt-loss")
    if d.tasks < 1:
        out.append("data.tasks must be >= 1")
    if not 0 <= d.noise <= 0.5:
        out.append("data.noise must lie in [0, 0.5]")
    return out


def _merge(cfg: Config, overrides: dict, where: str = "") -> None:
    for key, value in overrides.items():
        if key == "seed":
            cfg.seed = value
            continue
        if key not in _SECTIONS:
            raise ConfigurationError(f"unknown config key '{where}{key}'")
        if not isinstance(value, dict):
            raise ConfigurationError(f"config section '{key}' must be a mapping")
        section = getattr(cfg, key)
        names = {f.name for f in dataclasses.fields(section)}
        for k, v in value.items():
            if k not in names:
                raise ConfigurationError(f"unknown config key '{key}.{k}'")
            default = getattr(section, k)
            if isinstance(default, bool) and not isinstance(v, bool):
                raise ConfigurationError(f"'{key}.{k}' must be a boolean")
            if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            setattr(section, k, v)


def make_config(preset: str | None = "desk", overrides: dict | None = None) -> Config:
    cfg = Config()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset '{preset}'")
        _merge(cfg, PRESET_OVERRIDES[preset])
    if overrides:
        _merge(cfg, overrides)
    return cfg.validate()


def load_config(path: str | Path, preset: str | None = None) -> Config:
    """Load a YAML config file. The file may name a ``preset`` at top level."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    file_preset = raw.pop("preset", "desk")
    return make_config(preset or file_preset, raw)


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    _merge(cfg, data)
    return cfg.validate()


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def describe_defaults(preset: str | None = None) -> str:
    """One line per field: dotted name, default value, provenance."""
    cfg = make_config(preset) if preset else Config()
    lines = [f"seed = {cfg.seed!r}  # {Config.__dataclass_fields__['seed'].metadata['source']}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            note = f.metadata.get("source", "")
            if preset and section in PRESET_OVERRIDES.get(preset, {}) and f.name in PRESET_OVERRIDES[preset][section]:
                note = f"preset '{preset}' (desk-scale override); default: {note}"
            lines.append(f"{section}.{f.name} = {value!r}  # {note}")
    return "\n".join(lines)
