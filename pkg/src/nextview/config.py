"""Run configuration: nested dataclasses with a flat key-value file format.

The on-disk form is one ``section.key = value`` line per field, so every
report can embed a checksum of the exact configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .tokenizer import DESK_SCHEDULE


@dataclass
class DataConfig:
    objects: int = 512
    views: int = 16
    seed: int = 7
    eval_objects: int = 64
    eval_views: int = 7
    eval_seed: int = 9007
    image_size: int = 32
    classic_cameras: bool = False


@dataclass
class VaeConfig:
    schedule: str = ",".join(str(s) for s in DESK_SCHEDULE)
    embed_dim: int = 64
    vocab: int = 512
    width: int = 128
    res_blocks: int = 2
    epochs: int = 12
    batch: int = 64
    lr: float = 2e-3
    beta: float = 0.25
    seed: int = 11


@dataclass
class ModelConfig:
    depth: int = 4
    heads: int = 0  # 0 -> depth
    d_sem: int = 128
    cls_head_adaln: bool = False
    global_only: bool = False


@dataclass
class TrainConfig:
    steps: int = 2500
    batch: int = 24
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.02
    inner_lr_mult: float = 10.0
    p_drop_global: float = 0.1
    p_drop_local: float = 0.1
    elementwise_global: bool = False
    data_fraction: float = 1.0
    seed: int = 0
    log_every: int = 200


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    guidance: float = 2.0
    seed: int = 1234


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> None:
        from .tokenizer import ScaleSchedule

        sched = ScaleSchedule.parse(self.vae.schedule)
        if self.data.image_size % sched.latent_side != 0:
            raise ValueError("image size must be a multiple of the finest schedule side")
        if self.model.heads and (64 * self.model.depth) % self.model.heads != 0:
            raise ValueError("heads must divide the model width (64 x depth)")
        if not 0.0 < self.train.data_fraction <= 1.0:
            raise ValueError("data_fraction must be in (0, 1]")


_SECTIONS = ("data", "vae", "model", "train", "sampler")


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {value!r}")
    return typ(value)


def to_flat(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {getattr(sub, f.name)}")
    return "\n".join(lines) + "\n"


def from_flat(text: str) -> RunConfig:
    cfg = RunConfig()
    known = {
        section: {f.name: f.type for f in fields(getattr(cfg, section))}
        for section in _SECTIONS
    }
    types = {"int": int, "float": float, "str": str, "bool": bool}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line or "." not in line.split("=", 1)[0]:
            raise ValueError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        section, name = key.split(".", 1)
        if section not in known or name not in known[section]:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        typ = known[section][name]
        typ = types[typ] if isinstance(typ, str) else typ
        setattr(getattr(cfg, section), name, _coerce(value, typ))
    cfg.validate()
    return cfg


def load(path: str) -> RunConfig:
    with open(path) as f:
        return from_flat(f.read())


def save(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(to_flat(cfg))


def checksum(cfg: RunConfig) -> str:
    return hashlib.sha256(to_flat(cfg).encode()).hexdigest()


def replace(cfg: RunConfig, **section_updates) -> RunConfig:
    """Functional update, e.g. replace(cfg, train={"seed": 3})."""
    parts = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        updates = section_updates.get(section, {})
        parts[section] = dataclasses.replace(sub, **updates)
    out = RunConfig(**parts)
    out.validate()
    return out
