"""
Configuration handling for kspace-loupe runs.

A run configuration is a JSON document with the sections ``data``, ``pattern``,
``model``, ``train``, ``tv``, ``eval`` and ``seeds``. Files are read with
``yaml.safe_load`` so a YAML rendition of the same keys loads too. Unknown keys
are rejected; missing keys fall back to the desk-scale defaults below.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union, get_type_hints
import hashlib
import json
import logging

import yaml

from .types import KspaceLoupeError, PatternMode, ReconMethod, SamplingMode, Split

logger = logging.getLogger(__name__)

PRESETS_DIRECTORY = Path(__file__).parent / "presets"
THREADS_ENV = "KSPACE_LOUPE_THREADS"


class ConfigError(KspaceLoupeError):
    """Raised for malformed, unknown or inconsistent configuration values"""
    pass


@dataclass(frozen=True)
class DataConfig:
    height: int = 64
    width: int = 64
    n_coils: int = 4
    n_train: int = 20
    n_val: int = 5
    n_test: int = 10
    noise_std: float = 0.0
    output_dir: str = "data"


@dataclass(frozen=True)
class PatternConfig:
    gamma: float = 0.1       # under-sampling ratio, calibration included
    slope: float = 0.25      # a in P = sigmoid(a * w)
    b_slope: float = 12.0    # AS-mode relaxation slope
    calib_size: int = 8      # side of the fully sampled central block
    vd_exponent: float = 4.0


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 5        # K
    n_cg: int = 10
    n_cg_eval: int = 30
    channels: int = 16


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "BS"
    lr: float = 1e-3
    lr_denoiser: Optional[float] = None
    lr_dc: Optional[float] = None
    lr_pattern: Optional[float] = None
    epochs: int = 50
    batch_size: int = 1
    manifest: str = "data/manifest.json"
    checkpoint_dir: str = "checkpoints"


@dataclass(frozen=True)
class TVConfig:
    alpha: float = 0.005
    n_iter: int = 200
    tau: Optional[float] = None    # None: 0.99 / L from the power method
    sigma: Optional[float] = None


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    pattern_mode: str = "learned-topk"
    method: str = "modl"
    pattern_file: Optional[str] = None
    output_dir: str = "reports"


@dataclass(frozen=True)
class SeedConfig:
    data: int = 0
    init: int = 1
    sampling: int = 2


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pattern: PatternConfig = field(default_factory=PatternConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tv: TVConfig = field(default_factory=TVConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("Configuration must be a mapping of sections")
        sections = get_type_hints(cls)
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"Unknown configuration sections: {sorted(unknown)}")
        kwargs = {name: _section_from_dict(sections[name], data.get(name, {}), name)
                  for name in sections}
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, config_file: Union[str, Path],
                  base: Optional["RunConfig"] = None) -> "RunConfig":
        """Create a configuration from a JSON (or YAML) file.

        Keys present in the file replace those of ``base`` (the defaults when not given).
        """
        try:
            with open(config_file, 'r') as f:
                data = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Failed to load configuration file {config_file}: {e}") from e
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{config_file}: configuration must be a mapping of sections")
        logger.debug("Loaded configuration from %s", config_file)
        if base is None:
            return cls.from_dict(data)
        merged = base.to_dict()
        for section, values in data.items():
            if section in merged and isinstance(values, Mapping):
                merged[section].update(values)
            else:
                merged[section] = values
        return cls.from_dict(merged)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; ``None`` values are skipped."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ConfigError(f"Unknown configuration key: {dotted}")
            data[section][key] = value
        return RunConfig.from_dict(data)

    def validate(self) -> None:
        d, p, m, t, tv = self.data, self.pattern, self.model, self.train, self.tv
        if d.height < 16 or d.width < 16:
            raise ConfigError(f"Image size must be at least 16x16, got {d.height}x{d.width}")
        if d.n_coils < 1:
            raise ConfigError("data.n_coils must be >= 1")
        if min(d.n_train, d.n_val, d.n_test) < 0:
            raise ConfigError("Sample counts must be non-negative")
        if d.noise_std < 0:
            raise ConfigError("data.noise_std must be >= 0")
        if not 0.0 < p.gamma < 1.0:
            raise ConfigError(f"pattern.gamma must lie in (0, 1), got {p.gamma}")
        if p.slope <= 0 or p.b_slope <= 0:
            raise ConfigError("pattern.slope and pattern.b_slope must be positive")
        if p.calib_size < 0 or p.calib_size > min(d.height, d.width):
            raise ConfigError(f"pattern.calib_size {p.calib_size} does not fit the image")
        if p.calib_size ** 2 >= p.gamma * d.height * d.width:
            raise ConfigError("Calibration region exceeds the sampling budget")
        if p.vd_exponent < 0:
            raise ConfigError("pattern.vd_exponent must be >= 0")
        if m.n_blocks < 1 or m.n_cg < 1 or m.n_cg_eval < 1 or m.channels < 1:
            raise ConfigError("model.n_blocks, n_cg, n_cg_eval and channels must be >= 1")
        if t.mode not in {mode.value for mode in SamplingMode}:
            raise ConfigError(f"train.mode must be BS or AS, got {t.mode}")
        if t.epochs < 0 or t.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        for name in ("lr", "lr_denoiser", "lr_dc", "lr_pattern"):
            value = getattr(t, name)
            if value is not None and value <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if tv.alpha < 0 or tv.n_iter < 1:
            raise ConfigError("tv.alpha must be >= 0 and tv.n_iter >= 1")
        _check_choice("eval.split", self.eval.split, Split)
        _check_choice("eval.pattern_mode", self.eval.pattern_mode, PatternMode)
        _check_choice("eval.method", self.eval.method, ReconMethod)

    @property
    def sampling_mode(self) -> SamplingMode:
        return SamplingMode(self.train.mode)


def _check_choice(key: str, value: str, enum) -> None:
    allowed = [e.value for e in enum]
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")


def _coerce(key: str, annotation: Any, value: Any) -> Any:
    optional = annotation in (Optional[int], Optional[float], Optional[str])
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} must not be null")
    base = {Optional[int]: int, Optional[float]: float, Optional[str]: str}.get(annotation, annotation)
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise ConfigError(f"Unsupported configuration type for {key}")


def _section_from_dict(cls, data: Any, section: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"Section '{section}' must be a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"Unknown keys in section '{section}': {sorted(unknown)}")
    values = {k: _coerce(f"{section}.{k}", hints[k], v) for k, v in data.items()}
    return replace(cls(), **values)


def available_presets() -> Dict[str, Path]:
    return {p.stem.replace("_", "-"): p for p in sorted(PRESETS_DIRECTORY.glob("*.json"))}


def load_preset(name: str) -> RunConfig:
    presets = available_presets()
    if name not in presets:
        raise ConfigError(f"Unknown preset {name!r}; available: {sorted(presets)}")
    return RunConfig.from_file(presets[name])
