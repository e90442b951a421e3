"""Experiment configuration: one JSON/TOML file drives every command.

Sections map onto the dataclasses of the corresponding modules; validation
failures carry the dotted field path.  The canonical hash of the resolved
config is embedded in every output artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .augment import AugmentationPolicy, MixupParams, SpecAugmentParams
from .dsp import FeatureConfig
from .errors import ConfigError, ValidationError
from .model import ConvSpec, ModelConfig, DEFAULT_ENCODER
from .train import TrainConfig

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class SynthSection:
    n_speakers: int = 4
    utterances_per_speaker_per_class: int = 20
    duration_s: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class CorpusSection:
    manifest: str | None = None
    synth: SynthSection | None = None
    merge_excited: bool = False
    unlabeled_manifest: str | None = None
    synth_unlabeled: SynthSection | None = None
    cross_target_manifest: str | None = None
    synth_cross_target: bool = False
    noise_dir: str | None = None
    synth_noise_files: int = 5
    speaker_disjoint_split: bool = False

    def __post_init__(self):
        if self.manifest is None and self.synth is None:
            raise ValidationError("either manifest or synth must be given")


@dataclass(frozen=True)
class AttackSection:
    kind: str = "fgsm"
    epsilon: float = 0.08
    bim_steps: int = 10
    bim_step_size: float | None = None


@dataclass(frozen=True)
class ProtocolSection:
    n_repeats: int = 10
    snrs: tuple[float, ...] = (0.0, 10.0, 20.0)
    attacks: tuple[AttackSection, ...] = (
        AttackSection("fgsm", 0.08), AttackSection("bim", 0.08))
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    unlabeled_remainder: bool = True

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValidationError("n_repeats must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSection
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    seed: int = 0
    out_dir: str = "runs"
    jobs: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "features": FeatureConfig,
    "augment": AugmentationPolicy,
    "model": ModelConfig,
    "train": TrainConfig,
    "protocol": ProtocolSection,
}

_NESTED = {
    ("corpus", "synth"): SynthSection,
    ("corpus", "synth_unlabeled"): SynthSection,
    ("augment", "spec_params"): SpecAugmentParams,
    ("augment", "mixup_params"): MixupParams,
}


def _build_section(path: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a table/object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get((path, key))
        if sub is not None and value is not None:
            value = _build_section(f"{path}.{key}", sub, value)
        elif path == "model" and key == "encoder":
            value = _parse_encoder(value)
        elif path == "protocol" and key == "attacks":
            value = tuple(_build_section(f"protocol.attacks[{i}]", AttackSection, a)
                          for i, a in enumerate(value))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_encoder(raw) -> tuple[ConvSpec, ...]:
    specs = []
    for i, entry in enumerate(raw):
        try:
            specs.append(ConvSpec(tuple(entry["kernel"]), int(entry["channels"]),
                                  tuple(entry.get("stride", (1, 1)))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"model.encoder[{i}]: {exc}") from exc
    return tuple(specs)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(": config root must be an object")
    known = set(_SECTION_TYPES) | {"seed", "out_dir", "jobs"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    if "corpus" not in raw:
        raise ConfigError("corpus: section is required")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = _build_section(name, cls, raw[name])
    for scalar, typ in (("seed", int), ("out_dir", str), ("jobs", int)):
        if scalar in raw:
            if not isinstance(raw[scalar], typ):
                raise ConfigError(f"{scalar}: expected {typ.__name__}")
            kwargs[scalar] = raw[scalar]
    return ExperimentConfig(**kwargs)


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read JSON or TOML, apply ``key.path=value`` overrides, validate."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    if path.suffix == ".toml":
        raw = tomllib.loads(path.read_text())
    else:
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key.path=value")
        dotted, _, literal = item.partition("=")
        _apply_override(raw, dotted.strip(), literal.strip())
    return from_dict(raw)


def _apply_override(raw: dict, dotted: str, literal: str):
    try:
        value = json.loads(literal)
    except json.JSONDecodeError:
        value = literal
    node = raw
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {part} is not a table")
    node[parts[-1]] = value
