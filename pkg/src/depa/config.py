"""Sectioned run configuration (INI) with a desk-scale and a full-scale profile."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Tuple

from .detector import DetectorConfig
from .pretrain import DecoderConfig, EncoderConfig, PretrainConfig
from .slicing import SliceConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    profile: str = "desk"
    seed: int = 0
    manifest: str = ""
    run_dir: str = "runs/latest"
    workers: int = 1


@dataclass(frozen=True)
class FeatureConfig:
    kind: str = "lms"  # lms | stft
    sample_rate: int = 22050
    n_mels: int = 128
    out_bins: int = 512
    window_ms: float = 93.0
    hop_ms: float = 23.0

    def __post_init__(self):
        if self.kind not in ("lms", "stft"):
            raise ConfigError(f"features.kind must be 'lms' or 'stft', got {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.n_mels if self.kind == "lms" else self.out_bins


@dataclass(frozen=True)
class SliceSection:
    k: int = 3
    T: int = 96
    alpha: float = 0.1


@dataclass(frozen=True)
class VadConfig:
    enabled: bool = True
    frame_ms: float = 30.0
    rel_threshold_db: float = 30.0
    min_segment_s: float = 0.2
    merge_gap_s: float = 0.3


@dataclass(frozen=True)
class PipelineSection:
    pretrain: bool = True
    checkpoint: str = ""
    encoder: str = "pretrained"  # pretrained | random
    features: str = "depa"  # depa | frames | hcvp
    pretrain_splits: Tuple[str, ...] = ("train",)

    def __post_init__(self):
        object.__setattr__(self, "pretrain_splits", tuple(self.pretrain_splits))
        if self.encoder not in ("pretrained", "random"):
            raise ConfigError(f"pipeline.encoder must be 'pretrained' or 'random', got {self.encoder!r}")
        if self.features not in ("depa", "frames", "hcvp"):
            raise ConfigError(f"pipeline.features must be depa, frames or hcvp, got {self.features!r}")


SECTIONS = {
    "run": RunSection,
    "features": FeatureConfig,
    "slicing": SliceSection,
    "vad": VadConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "pretrain": PretrainConfig,
    "detector": DetectorConfig,
    "pipeline": PipelineSection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    slicing: SliceSection = field(default_factory=SliceSection)
    vad: VadConfig = field(default_factory=VadConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    @classmethod
    def full(cls) -> "RunConfig":
        return cls(run=RunSection(profile="full"))

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(
            run=RunSection(profile="desk"),
            slicing=SliceSection(k=2, T=8, alpha=0.1),
            encoder=EncoderConfig(embed_dim=256, channels=(8, 16, 32)),
            decoder=DecoderConfig(channels=(32, 16, 8)),
            pretrain=PretrainConfig(epochs=30, batch_size=32),
            detector=DetectorConfig(layers=4, hidden=128, epochs=60),
        )

    @classmethod
    def profile(cls, name: str) -> "RunConfig":
        if name == "desk":
            return cls.desk()
        if name == "full":
            return cls.full()
        raise ConfigError(f"unknown profile {name!r} (expected desk or full)")

    def slice_config(self) -> SliceConfig:
        return SliceConfig(self.slicing.k, self.slicing.T, self.slicing.alpha, self.features.dim)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            run=replace(self.run, seed=seed),
            pretrain=replace(self.pretrain, seed=seed),
            detector=replace(self.detector, seed=seed),
        )

    def override(self, section: str, **values) -> "RunConfig":
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        current = getattr(self, section)
        names = {f.name for f in fields(current)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        try:
            return replace(self, **{section: replace(current, **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {k: _format(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v: Any) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                return tuple(type(default[0])(x) for x in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from exc
    return raw


def parse_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case sensitive (T vs t)
    cp.read_string(text)
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if base is None:
        profile = cp.get("run", "profile", fallback="desk")
        base = RunConfig.profile(profile.strip())
    cfg = base
    explicit_seeds = set()
    for section in SECTIONS:
        if section not in cp:
            continue
        current = getattr(cfg, section)
        defaults = {f.name: getattr(current, f.name) for f in fields(current)}
        values: Dict[str, Any] = {}
        for key, raw in cp[section].items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse(raw, defaults[key], f"{section}.{key}")
        if "seed" in values and section != "run":
            explicit_seeds.add(section)
        cfg = cfg.override(section, **values)
    if "run" in cp and "seed" in cp["run"]:
        seed = cfg.run.seed
        for section in ("pretrain", "detector"):
            if section not in explicit_seeds:
                cfg = cfg.override(section, seed=seed)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_ini(f.read())
