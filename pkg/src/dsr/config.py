"""Configuration dataclasses, built-in profiles, and the config file parser.

The config file is plain INI-style text with one section per stage plus
``[model]`` and ``[synthesis]`` sections.  Unknown sections or keys are
rejected.  Values omitted everywhere fall back to the full-scale defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unparseable config files or unknown keys."""


@dataclass
class ModelConfig:
    resolution: int = 256
    latent_dim: int = 128
    codebook_size: int = 4096
    encoder_width: int = 128
    detector_width: int = 64
    upsampler_width: int = 32
    norm_groups: int = 8
    activation: str = "silu"

    def validate(self) -> None:
        if self.resolution % 8 != 0 or self.resolution < 64:
            raise ConfigError(f"resolution must be a multiple of 8 and >= 64, got {self.resolution}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        for name in ("latent_dim", "encoder_width", "detector_width", "upsampler_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class SynthesisConfig:
    # Gradient-noise mask shaping.
    min_octave: int = 1
    max_octave: int = 5
    threshold_low: float = 0.6
    threshold_high: float = 0.9
    min_area: float = 0.02
    max_area: float = 0.35
    max_tries: int = 20
    # Copy-paste smudge simulation.
    smudge_alpha_low: float = 0.5
    smudge_alpha_high: float = 1.0
    smudge_min_area: float = 0.02
    smudge_max_area: float = 0.2
    # Use top-k partial selection instead of a full distance sort per cell.
    partial_ranking: bool = False

    def validate(self) -> None:
        if not 0 <= self.min_area <= self.max_area <= 1:
            raise ConfigError("mask area range must satisfy 0 <= min_area <= max_area <= 1")
        if self.min_octave < 0 or self.max_octave < self.min_octave:
            raise ConfigError("octave range must satisfy 0 <= min_octave <= max_octave")
        if self.max_tries < 1:
            raise ConfigError("max_tries must be >= 1")


@dataclass
class StageConfig:
    stage: int
    iterations: int
    batch_size: int
    learning_rate: float = 2e-4
    lr_decay_at: int = 0  # iteration index at which lr is scaled, 0 disables
    lr_decay_factor: float = 0.1
    lambda1: float = 0.25
    lambda2: float = 1.0
    lambda3: float = 10.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    lambda_s: float = 0.05
    image_space_anomalies: bool = False
    random_sampling: bool = False
    loss_img_only: bool = False
    loss_feat_only: bool = False
    no_upsampler: bool = False
    supervised_anomaly_dirs: tuple[str, ...] = ()
    supervised_mix_ratio: float = 0.5
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0 writes only the final checkpoint

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigError(f"stage {self.stage}: iterations must be positive")
        if self.batch_size <= 0:
            raise ConfigError(f"stage {self.stage}: batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError(f"stage {self.stage}: learning_rate must be >= 0")
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ConfigError(f"stage {self.stage}: lambda2 and lambda3 must be >= 0")
        if self.loss_img_only and self.loss_feat_only:
            raise ConfigError(f"stage {self.stage}: loss_img_only and loss_feat_only are mutually exclusive")
        if not 0 < self.lambda_s < 1:
            raise ConfigError(f"stage {self.stage}: lambda_s must lie in (0, 1)")
        if not 0 <= self.supervised_mix_ratio <= 1:
            raise ConfigError(f"stage {self.stage}: supervised_mix_ratio must lie in [0, 1]")
        if self.log_interval <= 0:
            raise ConfigError(f"stage {self.stage}: log_interval must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, iterations=200_000, batch_size=32))
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(stage=2, iterations=100_000, batch_size=8, lr_decay_at=80_000)
    )
    stage3: StageConfig = field(default_factory=lambda: StageConfig(stage=3, iterations=20_000, batch_size=8))

    def validate(self) -> None:
        self.model.validate()
        self.synthesis.validate()
        for stage in (self.stage1, self.stage2, self.stage3):
            stage.validate()

    def stage(self, number: int) -> StageConfig:
        try:
            return {1: self.stage1, 2: self.stage2, 3: self.stage3}[number]
        except KeyError:
            raise ValueError(f"no stage {number}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(klass, values):
            names = {f.name for f in dataclasses.fields(klass)}
            unknown = set(values) - names
            if unknown:
                raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            values = dict(values)
            if "supervised_anomaly_dirs" in values:
                values["supervised_anomaly_dirs"] = tuple(values["supervised_anomaly_dirs"])
            return klass(**values)

        return cls(
            model=build(ModelConfig, data["model"]),
            synthesis=build(SynthesisConfig, data["synthesis"]),
            stage1=build(StageConfig, data["stage1"]),
            stage2=build(StageConfig, data["stage2"]),
            stage3=build(StageConfig, data["stage3"]),
        )


PROFILES = ("paper", "desk", "tiny")


def profile_config(name: str = "paper") -> RunConfig:
    """Return a fresh RunConfig for one of the built-in profiles.

    ``paper`` is the full-scale setup, ``desk`` a mid-size workstation setup,
    and ``tiny`` the small model used by the test and acceptance suites.
    """
    if name == "paper":
        return RunConfig()
    if name == "desk":
        cfg = RunConfig(
            model=ModelConfig(
                resolution=128, latent_dim=64, codebook_size=1024,
                encoder_width=64, detector_width=48, upsampler_width=24,
            ),
            stage1=StageConfig(stage=1, iterations=20_000, batch_size=8),
            stage2=StageConfig(stage=2, iterations=8_000, batch_size=8, lr_decay_at=6_400),
            stage3=StageConfig(stage=3, iterations=2_000, batch_size=8),
        )
        return cfg
    if name == "tiny":
        cfg = RunConfig(
            model=ModelConfig(
                resolution=64, latent_dim=32, codebook_size=512,
                encoder_width=32, detector_width=32, upsampler_width=16,
            ),
            stage1=StageConfig(stage=1, iterations=5_000, batch_size=8, log_interval=50),
            stage2=StageConfig(stage=2, iterations=2_000, batch_size=8, lr_decay_at=1_600, log_interval=50),
            stage3=StageConfig(stage=3, iterations=500, batch_size=8, log_interval=50),
        )
        return cfg
    raise ConfigError(f"unknown profile '{name}' (expected one of {PROFILES})")


_SECTION_CLASSES = {
    "model": ModelConfig,
    "synthesis": SynthesisConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "stage3": StageConfig,
}

# Keys that are fixed per section rather than user-settable.
_RESERVED_KEYS = {"stage"}


def _coerce(raw: str, annotation, *, context: str):
    if annotation is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{context}: expected an integer, got {raw!r}") from None
    if annotation is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{context}: expected a number, got {raw!r}") from None
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{context}: expected a boolean, got {raw!r}")
    if annotation is str:
        return raw.strip()
    # tuple[str, ...] (supervised_anomaly_dirs)
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _key_line(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip().lower()
        elif current == section and ("=" in stripped or ":" in stripped):
            name = stripped.replace(":", "=").split("=", 1)[0].strip().lower()
            if name == key:
                return lineno
    return None


def write_config(config: RunConfig, path: str | Path) -> Path:
    """Serialize a RunConfig in the same INI format that load_config reads."""
    path = Path(path)
    lines: list[str] = []
    for section in ("model", "synthesis", "stage1", "stage2", "stage3"):
        lines.append(f"[{section}]")
        target = getattr(config, section)
        for f in dataclasses.fields(type(target)):
            if f.name in _RESERVED_KEYS:
                continue
            value = getattr(target, f.name)
            if isinstance(value, tuple):
                value = ", ".join(value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def load_config(path: str | Path, profile: str = "paper") -> RunConfig:
    """Parse a config file on top of a profile's defaults.

    An empty file yields the profile defaults unchanged.  Unknown sections or
    keys raise :class:`ConfigError`; parse failures report the line number.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    config = profile_config(profile)
    for section in parser.sections():
        section_lower = section.lower()
        if section_lower not in _SECTION_CLASSES:
            raise ConfigError(
                f"{path}: unknown section [{section}] (expected one of {sorted(_SECTION_CLASSES)})"
            )
        target = getattr(config, section_lower)
        fields = {f.name: f.type for f in dataclasses.fields(type(target))}
        for key, raw in parser.items(section):
            if key in _RESERVED_KEYS or key not in fields:
                line = _key_line(text, section_lower, key)
                where = f"line {line}" if line is not None else "unknown line"
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}] ({where})")
            annotation = fields[key]
            if isinstance(annotation, str):  # dataclass stores annotations as strings
                annotation = {"int": int, "float": float, "bool": bool, "str": str}.get(annotation, tuple)
            value = _coerce(raw, annotation, context=f"{path} [{section}] {key}")
            setattr(target, key, value)
    config.validate()
    return config
