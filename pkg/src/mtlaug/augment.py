"""Augmentation transforms and construction of type-labeled training sets.

Three transforms: speed perturbation on raw audio, frequency/time masking and
mixup on log-mel features.  Every emitted sample records which transform
produced it; those labels drive the auxiliary classification task.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .corpus import Corpus, EMOTIONS, Utterance, Waveform, read_wav
from .dsp import FEATURE_MAGIC, FeatureConfig, LogMelSpectrogram, log_mel, resample
from .errors import FormatError, ProtocolError, ValidationError

log = logging.getLogger(__name__)

AUGMENTED_MAGIC = b"LMSA"


class AugmentationType(IntEnum):
    none = 0
    speed = 1
    specaugment = 2
    mixup = 3


@dataclass(frozen=True)
class SpecAugmentParams:
    max_freq_width: int = 27      # F: mask width drawn from {0..F} mel channels
    max_time_width: int = 100     # T: mask width drawn from {0..T} frames
    n_freq_masks: int = 1
    n_time_masks: int = 1
    mask_value: float | None = None  # None = per-utterance mean

    def __post_init__(self):
        if self.max_freq_width < 0 or self.max_time_width < 0:
            raise ValidationError("mask widths must be non-negative")
        if self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise ValidationError("mask counts must be non-negative")


@dataclass(frozen=True)
class MixupParams:
    alpha: float = 0.2
    fixed_lambda: float | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("mixup alpha must be positive")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValidationError("fixed mixup lambda must lie in [0, 1]")

    def draw(self, rng: np.random.Generator) -> float:
        if self.fixed_lambda is not None:
            return self.fixed_lambda
        return float(rng.beta(self.alpha, self.alpha))


@dataclass(frozen=True)
class AugmentedSample:
    features: LogMelSpectrogram
    emotion_label: np.ndarray | None  # soft 4-vector in EMOTIONS order
    aug_type: AugmentationType
    source_ids: tuple[str, ...]

    def __post_init__(self):
        if self.emotion_label is not None:
            lbl = np.asarray(self.emotion_label, dtype=np.float32)
            if lbl.shape != (len(EMOTIONS),) or np.any(lbl < 0) \
                    or abs(float(lbl.sum()) - 1.0) > 1e-5:
                raise ValidationError("emotion label must be a non-negative 4-vector summing to 1")
            object.__setattr__(self, "emotion_label", lbl)
        n_src = len(self.source_ids)
        if (self.aug_type == AugmentationType.mixup) != (n_src == 2):
            raise ValidationError("exactly 2 source ids iff the sample is a mixup")

    @property
    def labeled(self) -> bool:
        return self.emotion_label is not None

    @property
    def has_hard_label(self) -> bool:
        """True when the sample carries a single-class identity (no mixup)."""
        return self.labeled and self.aug_type != AugmentationType.mixup


def one_hot(emotion: str) -> np.ndarray:
    vec = np.zeros(len(EMOTIONS), dtype=np.float32)
    vec[EMOTIONS.index(emotion)] = 1.0
    return vec


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def speed_perturb(waveform: Waveform, factor: float) -> Waveform:
    """Time-warp the raw signal; duration scales by 1/factor, pitch by factor."""
    if factor <= 0:
        raise ValidationError("speed factor must be positive")
    return resample(waveform, factor)


def apply_masks(spec: LogMelSpectrogram,
                freq_masks: list[tuple[int, int]],
                time_masks: list[tuple[int, int]],
                mask_value: float | None = None) -> LogMelSpectrogram:
    """Mask explicit (start, width) bands; cells outside stay bit-identical."""
    v, tau = spec.data.shape
    value = float(spec.data.mean()) if mask_value is None else mask_value
    out = spec.data.copy()
    for f0, f in freq_masks:
        if f0 < 0 or f < 0 or f0 + f > v:
            raise ValidationError(f"frequency mask [{f0}, {f0 + f}) out of range for {v} channels")
        out[f0:f0 + f, :] = value
    for t0, t in time_masks:
        if t0 < 0 or t < 0 or t0 + t > tau:
            raise ValidationError(f"time mask [{t0}, {t0 + t}) out of range for {tau} frames")
        out[:, t0:t0 + t] = value
    return LogMelSpectrogram(out, spec.config)


def sample_masks(shape: tuple[int, int], params: SpecAugmentParams,
                 rng: np.random.Generator) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Draw mask bands: width ~ U{0..max}, start ~ U over valid positions."""
    v, tau = shape
    if params.max_freq_width > v:
        raise ValidationError(f"max freq mask {params.max_freq_width} exceeds {v} channels")
    if params.max_time_width > tau:
        raise ValidationError(f"max time mask {params.max_time_width} exceeds {tau} frames")
    freq_masks = []
    for _ in range(params.n_freq_masks):
        f = int(rng.integers(0, params.max_freq_width + 1))
        f0 = int(rng.integers(0, max(v - f, 1)))
        freq_masks.append((f0, f))
    time_masks = []
    for _ in range(params.n_time_masks):
        t = int(rng.integers(0, params.max_time_width + 1))
        t0 = int(rng.integers(0, max(tau - t, 1)))
        time_masks.append((t0, t))
    return freq_masks, time_masks


def spec_augment(spec: LogMelSpectrogram, params: SpecAugmentParams,
                 rng: np.random.Generator) -> LogMelSpectrogram:
    """Random frequency and time masking; the input is not mutated."""
    freq_masks, time_masks = sample_masks(spec.data.shape, params, rng)
    return apply_masks(spec, freq_masks, time_masks, params.mask_value)


def mixup(a: tuple[LogMelSpectrogram, np.ndarray, str],
          b: tuple[LogMelSpectrogram, np.ndarray, str],
          lam: float) -> AugmentedSample:
    """Convex combination of two labeled samples and their labels.

    Operand order is fixed (lambda-weighted side first) so the operation is
    exactly symmetric under (a, b, lam) -> (b, a, 1 - lam).
    """
    feat_a, label_a, id_a = a
    feat_b, label_b, id_b = b
    if label_a is None or label_b is None:
        raise ValidationError("mixup requires two labeled samples")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("mixup lambda must lie in [0, 1]")
    if feat_a.data.shape != feat_b.data.shape:
        raise ValidationError(
            f"mixup shape mismatch: {feat_a.data.shape} vs {feat_b.data.shape}")
    lam = np.float32(lam)
    one_minus = np.float32(1.0) - lam
    mixed = lam * feat_a.data + one_minus * feat_b.data
    label = lam * np.asarray(label_a, dtype=np.float32) \
        + one_minus * np.asarray(label_b, dtype=np.float32)
    return AugmentedSample(LogMelSpectrogram(mixed, feat_a.config), label,
                           AugmentationType.mixup, (id_a, id_b))


# ---------------------------------------------------------------------------
# set construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Which transforms feed the auxiliary task, and how many copies of each."""
    include_none: bool = True
    speed: int = 2
    specaugment: int = 1
    mixup: int = 1
    speed_factors: tuple[float, ...] = (0.9, 1.1)
    spec_params: SpecAugmentParams = field(default_factory=SpecAugmentParams)
    mixup_params: MixupParams = field(default_factory=MixupParams)

    def __post_init__(self):
        if min(self.speed, self.specaugment, self.mixup) < 0:
            raise ValidationError("augmentation multiplicities must be non-negative")
        if self.speed > 0 and not self.speed_factors:
            raise ValidationError("speed augmentation needs at least one factor")

    def active_types(self) -> tuple[AugmentationType, ...]:
        types = []
        if self.include_none:
            types.append(AugmentationType.none)
        if self.speed > 0:
            types.append(AugmentationType.speed)
        if self.specaugment > 0:
            types.append(AugmentationType.specaugment)
        if self.mixup > 0:
            types.append(AugmentationType.mixup)
        return tuple(types)

    @property
    def n_aug_classes(self) -> int:
        return len(self.active_types())

    def label_index(self, aug_type: AugmentationType) -> int:
        """Auxiliary class index of a transform under this policy (4-way by
        default, binary in the single-augmentation study arms)."""
        return self.active_types().index(aug_type)


def extract_features(corpus: Corpus, config: FeatureConfig,
                     waveforms: dict[str, Waveform] | None = None
                     ) -> dict[str, LogMelSpectrogram]:
    """Log-mel features for every utterance, keyed by id."""
    out = {}
    for u in corpus.utterances:
        wav = waveforms[u.id] if waveforms is not None else read_wav(u.audio_path)
        out[u.id] = log_mel(wav, config)
    return out


def load_waveforms(corpus: Corpus) -> dict[str, Waveform]:
    return {u.id: read_wav(u.audio_path) for u in corpus.utterances}


def build_augmented_set(corpus: Corpus, policy: AugmentationPolicy,
                        feature_config: FeatureConfig, rng: np.random.Generator,
                        waveforms: dict[str, Waveform] | None = None,
                        features: dict[str, LogMelSpectrogram] | None = None
                        ) -> list[AugmentedSample]:
    """Materialize the policy over one split.

    Mixup partners are drawn uniformly from the labeled utterances of the
    same corpus, never across splits; unlabeled utterances contribute only
    none/speed/specaugment variants.
    """
    if waveforms is None:
        waveforms = load_waveforms(corpus)
    if features is None:
        features = {uid: log_mel(w, feature_config) for uid, w in waveforms.items()}
    labeled = [u for u in corpus.utterances if u.labeled]
    if policy.mixup > 0 and len(labeled) < 2:
        raise ProtocolError("mixup needs at least 2 labeled utterances in the split")

    def label_of(u: Utterance):
        return one_hot(u.emotion) if u.labeled else None

    samples: list[AugmentedSample] = []
    for u in corpus.utterances:
        base = features[u.id]
        if policy.include_none:
            samples.append(AugmentedSample(base, label_of(u), AugmentationType.none, (u.id,)))
        for k in range(policy.speed):
            factor = policy.speed_factors[k % len(policy.speed_factors)]
            warped = speed_perturb(waveforms[u.id], factor)
            samples.append(AugmentedSample(log_mel(warped, feature_config), label_of(u),
                                           AugmentationType.speed, (u.id,)))
        for _ in range(policy.specaugment):
            samples.append(AugmentedSample(spec_augment(base, policy.spec_params, rng),
                                           label_of(u), AugmentationType.specaugment, (u.id,)))
        if u.labeled:
            for _ in range(policy.mixup):
                candidates = [v for v in labeled if v.id != u.id]
                partner = candidates[int(rng.integers(0, len(candidates)))]
                lam = policy.mixup_params.draw(rng)
                samples.append(mixup((base, label_of(u), u.id),
                                     (features[partner.id], label_of(partner), partner.id),
                                     lam))
    return samples


# ---------------------------------------------------------------------------
# augmented-sample cache (feature blob + aug-type byte)
# ---------------------------------------------------------------------------

def save_augmented(path, sample: AugmentedSample):
    path = Path(path)
    spec = sample.features
    with path.open("wb") as fh:
        fh.write(AUGMENTED_MAGIC)
        fh.write(struct.pack("<II", spec.n_mels, spec.n_frames))
        fh.write(struct.pack("<B", int(sample.aug_type)))
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())
    meta = {
        "config": spec.config.to_dict(),
        "emotion_label": None if sample.emotion_label is None
        else [float(x) for x in sample.emotion_label],
        "source_ids": list(sample.source_ids),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def load_augmented(path) -> AugmentedSample:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != AUGMENTED_MAGIC:
        raise FormatError(f"{path}: bad augmented-feature magic {raw[:4]!r}")
    n_mels, n_frames = struct.unpack_from("<II", raw, 4)
    (aug_byte,) = struct.unpack_from("<B", raw, 12)
    expected = 13 + 4 * n_mels * n_frames
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated blob ({len(raw)} != {expected})")
    data = np.frombuffer(raw, dtype="<f4", count=n_mels * n_frames, offset=13)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = FeatureConfig.from_dict(meta["config"])
    label = None if meta["emotion_label"] is None \
        else np.asarray(meta["emotion_label"], dtype=np.float32)
    return AugmentedSample(LogMelSpectrogram(data.reshape(n_mels, n_frames).copy(), config),
                           label, AugmentationType(aug_byte), tuple(meta["source_ids"]))
