"""Scale profiles, experiment configuration and seeding.

Config files are flat ``key = value`` text with ``#`` comments. Unknown keys
are rejected; missing keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "ConfigError",
    "ScaleProfile",
    "AblationFlags",
    "ExperimentConfig",
    "full_profile",
    "toy_profile",
    "get_profile",
    "load_config",
    "parse_config",
    "seed_everything",
]

MODALITIES = ("lr", "sketch", "mask")


class ConfigError(ValueError):
    """Raised for unparsable config text or invariant violations."""


@dataclass(frozen=True)
class ScaleProfile:
    name: str
    generator_resolution: int
    style_layer_count: int
    style_dim: int
    input_latent_spatial: int
    input_latent_channels: int
    encoder_block_count: int
    contour_input_resolution: int
    # side of the low-resolution contour (32 at full scale)
    lr_contour_size: int
    # resolution the image losses and the embedder work at
    loss_resolution: int
    # identity encoder stage widths
    encoder_widths: tuple[int, ...]
    main_encoder_widths: tuple[int, ...]
    # synthesis channels per level, 4x4 first
    generator_channels: tuple[int, ...]
    embedding_dim: int

    def __post_init__(self):
        res = self.generator_resolution
        if res < 4 or res & (res - 1):
            raise ConfigError(f"generator_resolution must be a power of two, got {res}")
        expected = 2 * int(math.log2(res)) - 2
        if self.style_layer_count != expected:
            raise ConfigError(
                f"style_layer_count={self.style_layer_count} but 2*log2({res})-2={expected}"
            )
        if res < 2 * self.input_latent_spatial:
            raise ConfigError("generator_resolution must be >= 2*input_latent_spatial")
        for name in ("encoder_widths", "main_encoder_widths"):
            if len(getattr(self, name)) != self.encoder_block_count:
                raise ConfigError(f"{name} must have encoder_block_count entries")
        if len(self.generator_channels) != self.num_levels:
            raise ConfigError(f"generator_channels needs {self.num_levels} entries")

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.generator_resolution)) - 1

    @property
    def latent_shapes(self) -> tuple[tuple[int, int], tuple[int, int, int]]:
        s = self.input_latent_spatial
        return (
            (self.style_layer_count, self.style_dim),
            (self.input_latent_channels, s, s),
        )


def full_profile() -> ScaleProfile:
    return ScaleProfile(
        name="full",
        generator_resolution=1024,
        style_layer_count=18,
        style_dim=512,
        input_latent_spatial=4,
        input_latent_channels=512,
        encoder_block_count=4,
        contour_input_resolution=256,
        lr_contour_size=32,
        loss_resolution=256,
        encoder_widths=(64, 128, 256, 512),
        main_encoder_widths=(64, 128, 256, 512),
        generator_channels=(512, 512, 512, 512, 256, 128, 64, 32, 16),
        embedding_dim=512,
    )


def toy_profile() -> ScaleProfile:
    return ScaleProfile(
        name="toy",
        generator_resolution=64,
        style_layer_count=10,
        style_dim=64,
        input_latent_spatial=4,
        input_latent_channels=64,
        encoder_block_count=4,
        contour_input_resolution=64,
        lr_contour_size=8,
        loss_resolution=64,
        encoder_widths=(32, 64, 128, 256),
        main_encoder_widths=(16, 32, 64, 64),
        generator_channels=(64, 64, 32, 16, 8),
        embedding_dim=64,
    )


_PROFILES = {"full": full_profile, "toy": toy_profile}


def get_profile(name: str) -> ScaleProfile:
    try:
        return _PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}") from None


@dataclass(frozen=True)
class AblationFlags:
    use_ifblock: bool = True
    use_input_latent: bool = True
    load_pretrained_id: bool = True

    def tag(self) -> str:
        return "".join("T" if v else "F" for v in dataclasses.astuple(self))

    @classmethod
    def from_tag(cls, tag: str) -> AblationFlags:
        tag = tag.strip().upper()
        if len(tag) != 3 or set(tag) - {"T", "F"}:
            raise ConfigError(f"ablation tag must be three of T/F, got {tag!r}")
        return cls(*(c == "T" for c in tag))


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "toy"
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 0.5
    lambda4: float = 0.003
    learning_rate: float = 1e-4
    batch_size: int = 8
    refinement_steps: int = 5
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    modality: str = "lr"
    mask_classes: int = 4
    # training loop
    steps: int = 1000
    log_every: int = 10
    checkpoint_every: int = 500
    final_only: bool = False
    strict_norm: bool = False
    # data
    data_dir: str = ""
    num_identities: int = 8
    renders_per_identity: int = 4
    per_contour: int = 10
    # frozen components
    generator_checkpoint: str = ""
    generator_pretrain_steps: int = 1500
    embedder_pretrain_steps: int = 600
    avg_samples: int = 10_000
    out_dir: str = "runs/default"

    def __post_init__(self):
        for i in range(1, 5):
            if getattr(self, f"lambda{i}") < 0:
                raise ConfigError(f"lambda{i} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.refinement_steps < 1:
            raise ConfigError("refinement_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.mask_classes < 2:
            raise ConfigError("mask_classes must be >= 2")
        if self.per_contour < 1:
            raise ConfigError("per_contour must be >= 1")
        if self.profile not in _PROFILES:
            raise ConfigError(f"profile must be one of {sorted(_PROFILES)}")

    @property
    def scale(self) -> ScaleProfile:
        return get_profile(self.profile)

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "ablation":
                for k, v in dataclasses.asdict(self.ablation).items():
                    lines.append(f"{k} = {_format(v)}")
            else:
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_ALIASES = {"lr": "learning_rate", "T": "refinement_steps"}
_FLAG_KEYS = {f.name for f in dataclasses.fields(AblationFlags)}
_TYPES = {
    f.name: f.type for f in dataclasses.fields(ExperimentConfig) if f.name != "ablation"
}


def _coerce(key: str, raw: str, where: str):
    kind = _TYPES.get(key, "bool" if key in _FLAG_KEYS else None)
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={raw!r} as {kind}") from None


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse config text, then apply ``key=value`` overrides (which win)."""
    values: dict = {}
    entries = [(f"line {n}", line) for n, line in enumerate(text.splitlines(), 1)]
    entries += [("--set", o) for o in overrides or []]
    for where, line in entries:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _TYPES and key not in _FLAG_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _coerce(key, raw, where)
    flags = {k: values.pop(k) for k in list(values) if k in _FLAG_KEYS}
    return ExperimentConfig(ablation=AblationFlags(**flags), **values)


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a torch generator for explicit use."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)
