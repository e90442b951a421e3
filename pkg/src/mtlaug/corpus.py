"""Corpus data model: manifests, WAV decoding, splits, synthetic generation.

A corpus is an immutable list of utterance records.  Audio lives on disk and
is decoded lazily through :func:`read_wav`; everything is normalized to mono
16 kHz float in [-1, 1].
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ProtocolError, ValidationError, FormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
EMOTIONS = ("angry", "happy", "neutral", "sad")
UNLABELED = "unlabeled"
MANIFEST_HEADER = ["id", "audio_path", "speaker_id", "emotion", "corpus_tag"]


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    speaker_id: str
    emotion: str
    corpus_tag: str = ""

    @property
    def labeled(self) -> bool:
        return self.emotion != UNLABELED

    @property
    def emotion_index(self) -> int:
        return EMOTIONS.index(self.emotion)


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    name: str = ""

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"corpus {self.name!r}: duplicate utterance ids")

    @property
    def speakers(self) -> tuple[str, ...]:
        seen = {}
        for u in self.utterances:
            seen.setdefault(u.speaker_id, None)
        return tuple(seen)

    def __len__(self) -> int:
        return len(self.utterances)

    def subset(self, pred, name: str | None = None) -> "Corpus":
        return Corpus(tuple(u for u in self.utterances if pred(u)),
                      name if name is not None else self.name)

    def labeled_only(self) -> "Corpus":
        return self.subset(lambda u: u.labeled)

    def as_unlabeled(self, name: str | None = None) -> "Corpus":
        """Copy with emotion labels hidden; used for unlabeled-pool experiments."""
        utts = tuple(replace(u, emotion=UNLABELED) for u in self.utterances)
        return Corpus(utts, name if name is not None else self.name)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1 or s.size == 0:
            raise ValidationError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValidationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(path, name: str | None = None, merge_excited: bool = False) -> Corpus:
    """Read a CSV manifest into a Corpus.

    With merge_excited, rows labeled "excited" are folded into "happy";
    otherwise any emotion outside the four classes (or "unlabeled") is a
    validation error.  Audio files are not checked here.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    utterances = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return Corpus((), name or path.stem)
    if rows[0] != MANIFEST_HEADER:
        raise ParseError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        uid, audio_path, speaker_id, emotion, tag = row
        if merge_excited and emotion == "excited":
            emotion = "happy"
        if emotion not in EMOTIONS and emotion != UNLABELED:
            raise ValidationError(
                f"{path}:{lineno}: emotion {emotion!r} not in {EMOTIONS + (UNLABELED,)}")
        utterances.append(Utterance(uid, audio_path, speaker_id, emotion, tag))
    return Corpus(tuple(utterances), name or path.stem)


def save_manifest(corpus: Corpus, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for u in corpus.utterances:
            writer.writerow([u.id, u.audio_path, u.speaker_id, u.emotion, u.corpus_tag])


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Decode a 16-bit PCM RIFF file to mono float at 16 kHz.

    Multichannel audio is averaged across channels; other sample rates are
    resampled with the band-limited interpolator from the dsp module.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            sampwidth = fh.getsampwidth()
            rate = fh.getframerate()
            n_frames = fh.getnframes()
            payload = fh.readframes(n_frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: unsupported WAV encoding ({exc})") from exc
    if sampwidth != 2:
        raise FormatError(f"{path}: only 16-bit PCM is supported, got {8 * sampwidth}-bit")
    if n_frames == 0:
        raise ValidationError(f"{path}: zero-length payload")
    data = np.frombuffer(payload, dtype="<i2").astype(np.float32) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    if rate != SAMPLE_RATE:
        from .dsp import convert_sample_rate
        return convert_sample_rate(Waveform(data, rate), SAMPLE_RATE)
    return Waveform(data, SAMPLE_RATE)


def write_wav(path, waveform: Waveform):
    """Write mono 16-bit PCM."""
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPrototype:
    """Prosody recipe for one synthetic emotion class."""
    base_f0_hz: float
    f0_slope_hz_per_s: float
    energy: float
    syllable_rate_hz: float


DEFAULT_PROTOTYPES: dict[str, ClassPrototype] = {
    "angry": ClassPrototype(280.0, 45.0, 0.75, 6.2),
    "happy": ClassPrototype(225.0, 25.0, 0.58, 4.6),
    "neutral": ClassPrototype(170.0, 0.0, 0.47, 3.2),
    "sad": ClassPrototype(125.0, -20.0, 0.36, 1.8),
}


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 4
    utterances_per_speaker_per_class: int = 20
    duration_s: float = 1.0
    seed: int = 0
    class_prototypes: dict[str, ClassPrototype] = field(
        default_factory=lambda: dict(DEFAULT_PROTOTYPES))

    def __post_init__(self):
        if self.n_speakers <= 0 or self.utterances_per_speaker_per_class <= 0:
            raise ValidationError("synthetic corpus needs >= 1 speaker and >= 1 utterance per class")
        if self.duration_s <= 0:
            raise ValidationError("duration_s must be positive")
        protos = list(self.class_prototypes.values())
        if len({p for p in protos}) != len(protos):
            raise ValidationError("class prototypes must be pairwise distinct")

    def shifted(self, f0_scale: float = 1.12, rate_scale: float = 1.25,
                seed_offset: int = 1000) -> "SynthConfig":
        """Variant with shifted prototypes and a fresh speaker pool,
        standing in for a second (mismatched) corpus."""
        protos = {
            emo: ClassPrototype(p.base_f0_hz * f0_scale, p.f0_slope_hz_per_s * f0_scale,
                                p.energy, p.syllable_rate_hz * rate_scale)
            for emo, p in self.class_prototypes.items()
        }
        return replace(self, class_prototypes=protos, seed=self.seed + seed_offset)


def _synth_utterance(proto: ClassPrototype, duration_s: float, speaker_f0_offset: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone stack with a syllable-rate amplitude envelope.

    Jitter magnitudes keep classes separable by construction while leaving
    enough within-class spread that learning takes several epochs.
    """
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = (proto.base_f0_hz + speaker_f0_offset + rng.normal(0.0, 6.0)
          + (proto.f0_slope_hz_per_s * (1.0 + rng.normal(0.0, 0.10))) * t)
    f0 = np.maximum(f0, 40.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    x = np.zeros(n)
    for h in range(1, 6):
        x += (1.0 / h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    rate = proto.syllable_rate_hz * (1.0 + rng.normal(0.0, 0.12))
    envelope = 0.55 + 0.45 * np.sin(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x *= envelope
    x *= proto.energy * (1.0 + rng.normal(0.0, 0.08)) / np.max(np.abs(x))
    return x.astype(np.float32)


def synth_corpus(config: SynthConfig, out_dir, name: str = "synth",
                 unlabeled: bool = False) -> Corpus:
    """Generate WAVs plus a manifest; deterministic for a fixed seed.

    With ``unlabeled=True`` the per-utterance prototypes are random blends of
    the class recipes and every row carries emotion = unlabeled.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    emotions = sorted(config.class_prototypes)
    utterances = []
    for s in range(config.n_speakers):
        speaker_id = f"spk{s:02d}"
        f0_offset = float(rng.uniform(-20.0, 20.0))
        for emo in emotions:
            proto = config.class_prototypes[emo]
            for k in range(config.utterances_per_speaker_per_class):
                if unlabeled:
                    a, b = rng.choice(emotions, size=2, replace=False)
                    lam = rng.uniform(0.2, 0.8)
                    pa, pb = config.class_prototypes[a], config.class_prototypes[b]
                    proto = ClassPrototype(
                        lam * pa.base_f0_hz + (1 - lam) * pb.base_f0_hz,
                        lam * pa.f0_slope_hz_per_s + (1 - lam) * pb.f0_slope_hz_per_s,
                        lam * pa.energy + (1 - lam) * pb.energy,
                        lam * pa.syllable_rate_hz + (1 - lam) * pb.syllable_rate_hz)
                uid = f"{name}_{speaker_id}_{emo}_{k:03d}"
                wav_path = out_dir / f"{uid}.wav"
                samples = _synth_utterance(proto, config.duration_s, f0_offset, rng)
                write_wav(wav_path, Waveform(samples))
                utterances.append(Utterance(
                    uid, str(wav_path), speaker_id,
                    UNLABELED if unlabeled else emo, name))
    corpus = Corpus(tuple(utterances), name)
    save_manifest(corpus, out_dir / "manifest.csv")
    return corpus


def synth_noise_pool(out_dir, n_files: int = 5, duration_s: float = 4.0,
                     seed: int = 0) -> list[Path]:
    """Colored-noise WAVs (white through brown) as a license-free noise source."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA01)))
    n = int(round(duration_s * SAMPLE_RATE))
    paths = []
    for i in range(n_files):
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
        slope = rng.uniform(0.0, 1.0)  # 0 = white, 1 = pink-ish
        shaping = np.ones_like(freqs)
        shaping[1:] = freqs[1:] ** (-slope)
        shaped = np.fft.irfft(spectrum * shaping, n=n)
        shaped = 0.5 * shaped / np.max(np.abs(shaped))
        path = out_dir / f"noise_{i:02d}.wav"
        write_wav(path, Waveform(shaped.astype(np.float32)))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_loso(corpus: Corpus) -> list[tuple[Corpus, Corpus]]:
    """One (train, test) fold per speaker; folds partition the corpus."""
    speakers = corpus.speakers
    if len(speakers) < 2:
        raise ProtocolError("leave-one-speaker-out needs at least 2 speakers")
    folds = []
    for spk in speakers:
        test = corpus.subset(lambda u, s=spk: u.speaker_id == s, f"{corpus.name}:test[{spk}]")
        train = corpus.subset(lambda u, s=spk: u.speaker_id != s, f"{corpus.name}:train[-{spk}]")
        folds.append((train, test))
    return folds


def split_random(corpus: Corpus, val_fraction: float = 0.30, seed: int = 0,
                 speaker_disjoint: bool = False) -> tuple[Corpus, Corpus]:
    """Split into (val, test); val size = floor(fraction * n), deterministic per seed.

    With speaker_disjoint, whole speakers are assigned to the validation side
    until the fraction is reached.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x51)))
    if speaker_disjoint:
        speakers = list(corpus.speakers)
        rng.shuffle(speakers)
        target = math.floor(val_fraction * len(corpus))
        val_speakers, count = set(), 0
        for spk in speakers:
            if count >= target:
                break
            val_speakers.add(spk)
            count += sum(1 for u in corpus.utterances if u.speaker_id == spk)
        val = corpus.subset(lambda u: u.speaker_id in val_speakers, f"{corpus.name}:val")
        test = corpus.subset(lambda u: u.speaker_id not in val_speakers, f"{corpus.name}:test")
        return val, test
    idx = rng.permutation(len(corpus))
    n_val = math.floor(val_fraction * len(corpus))
    val_ids = {corpus.utterances[i].id for i in idx[:n_val]}
    val = corpus.subset(lambda u: u.id in val_ids, f"{corpus.name}:val")
    test = corpus.subset(lambda u: u.id not in val_ids, f"{corpus.name}:test")
    return val, test


def subsample_labeled(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Speaker-stratified labeled subsample; returns (kept, remainder).

    Used by the labeled-data-fraction study: the remainder is typically
    recycled as an unlabeled pool.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return corpus, Corpus((), f"{corpus.name}:rest")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF7)))
    keep_ids = set()
    for spk in corpus.speakers:
        utts = [u for u in corpus.utterances if u.speaker_id == spk]
        idx = rng.permutation(len(utts))
        n_keep = max(1, math.floor(fraction * len(utts)))
        keep_ids.update(utts[i].id for i in idx[:n_keep])
    kept = corpus.subset(lambda u: u.id in keep_ids, f"{corpus.name}:frac{fraction}")
    rest = corpus.subset(lambda u: u.id not in keep_ids, f"{corpus.name}:rest")
    return kept, rest
