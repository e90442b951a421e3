"""Deterministic signal-processing kernels.

Framing, STFT, mel projection, band-limited resampling, and SNR-controlled
noise mixing.  Everything here is a pure function of its arguments; no RNG.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .corpus import Waveform
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"LMSP"


@dataclass(frozen=True)
class FeatureConfig:
    win_ms: float = 40.0
    hop_ms: float = 10.0
    n_mels: int = 128
    n_fft: int = 1024
    fmin: float = 0.0
    fmax: float = 8000.0
    target_dur_s: float = 7.5
    log_floor: float = 1e-10
    sample_rate: int = 16000

    def __post_init__(self):
        if self.hop_ms > self.win_ms:
            raise ValidationError("hop must not exceed window size")
        if self.n_mels < 1:
            raise ValidationError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValidationError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.target_dur_s <= 0:
            raise ValidationError("target_dur_s must be positive")
        if self.n_fft < self.win_length:
            raise ValidationError("n_fft must be >= window length in samples")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def target_length(self) -> int:
        return int(round(self.target_dur_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        """Frame count for a target-length signal; frame k covers
        [k*hop, k*hop + win), no centering, full frames only."""
        return 1 + (self.target_length - self.win_length) // self.hop_length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass(frozen=True)
class LogMelSpectrogram:
    data: np.ndarray  # (n_mels, n_frames) float32
    config: FeatureConfig

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ValidationError("spectrogram data must be 2-D (mels x frames)")
        if not np.all(np.isfinite(d)):
            raise ValidationError("spectrogram contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# length normalization
# ---------------------------------------------------------------------------

def pad_or_truncate(waveform: Waveform, target_dur_s: float) -> Waveform:
    """Fix the length to round(target_dur_s * rate): cut the tail or pad zeros."""
    n_target = int(round(target_dur_s * waveform.sample_rate))
    x = waveform.samples
    if x.size >= n_target:
        return Waveform(x[:n_target].copy(), waveform.sample_rate)
    out = np.zeros(n_target, dtype=np.float32)
    out[:x.size] = x
    return Waveform(out, waveform.sample_rate)


# ---------------------------------------------------------------------------
# STFT and mel projection
# ---------------------------------------------------------------------------

def stft_magnitude(waveform: Waveform, config: FeatureConfig) -> np.ndarray:
    """Hamming-windowed magnitude STFT, shape (n_fft//2 + 1, frames)."""
    x = waveform.samples
    win = config.win_length
    hop = config.hop_length
    if x.size < win:
        raise ValidationError(f"waveform shorter than one window ({x.size} < {win})")
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win).astype(np.float32)
    spec = np.fft.rfft(frames, n=config.n_fft, axis=1)
    return np.abs(spec).T.astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(config: FeatureConfig, sample_rate: int | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    sr = sample_rate or config.sample_rate
    n_bins = config.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * sr / config.n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax),
                                config.n_mels + 2))
    fb = np.zeros((config.n_mels, n_bins), dtype=np.float32)
    for m in range(config.n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(waveform: Waveform, config: FeatureConfig) -> LogMelSpectrogram:
    """Fixed-length log-mel feature: pad/cut, power STFT, mel project, ln(x + floor)."""
    if waveform.sample_rate != config.sample_rate:
        raise ValidationError(
            f"waveform rate {waveform.sample_rate} != feature rate {config.sample_rate}")
    fixed = pad_or_truncate(waveform, config.target_dur_s)
    mag = stft_magnitude(fixed, config)
    power = mag.astype(np.float64) ** 2
    mel = mel_filterbank(config).astype(np.float64) @ power
    data = np.log(mel + config.log_floor).astype(np.float32)
    return LogMelSpectrogram(data, config)


# ---------------------------------------------------------------------------
# band-limited resampling
# ---------------------------------------------------------------------------

_BASE_HALF_WIDTH = 32


def _sinc_interpolate(x: np.ndarray, positions: np.ndarray, cutoff: float) -> np.ndarray:
    """Windowed-sinc interpolation of x at fractional sample positions.

    cutoff <= 1 is the anti-alias lowpass in units of the input Nyquist.
    """
    hw = int(math.ceil(_BASE_HALF_WIDTH / cutoff))
    xp = np.concatenate([np.zeros(hw), x.astype(np.float64), np.zeros(hw + 1)])
    out = np.empty(positions.size, dtype=np.float64)
    taps = np.arange(-hw + 1, hw + 1)
    chunk = 8192
    for lo in range(0, positions.size, chunk):
        pos = positions[lo:lo + chunk]
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        d = frac[:, None] - taps[None, :]
        kernel = cutoff * np.sinc(cutoff * d)
        window = 0.5 + 0.5 * np.cos(np.pi * np.clip(d / hw, -1.0, 1.0))
        gathered = xp[(base[:, None] + hw) + taps[None, :]]
        out[lo:lo + chunk] = np.sum(gathered * kernel * window, axis=1)
    return out


def resample(waveform: Waveform, factor: float) -> Waveform:
    """Time-warp x(t) -> x(factor * t) at a fixed sample rate.

    Output length is round(n / factor); factor > 1 speeds up (and raises
    pitch by the same factor).
    """
    if not math.isfinite(factor) or factor <= 0:
        raise ValidationError(f"resample factor must be finite and positive, got {factor}")
    x = waveform.samples
    n_out = int(round(x.size / factor))
    if n_out < 1:
        raise ValidationError("resample factor leaves no samples")
    positions = np.arange(n_out, dtype=np.float64) * factor
    cutoff = min(1.0, 1.0 / factor)
    y = _sinc_interpolate(x, positions, cutoff)
    return Waveform(y.astype(np.float32), waveform.sample_rate)


def convert_sample_rate(waveform: Waveform, new_rate: int) -> Waveform:
    """Resample to a new rate (duration preserved)."""
    if new_rate <= 0:
        raise ValidationError("target sample rate must be positive")
    if new_rate == waveform.sample_rate:
        return waveform
    ratio = waveform.sample_rate / new_rate
    n_out = int(round(waveform.samples.size * new_rate / waveform.sample_rate))
    positions = np.arange(n_out, dtype=np.float64) * ratio
    cutoff = min(1.0, 1.0 / ratio)
    y = _sinc_interpolate(waveform.samples, positions, cutoff)
    return Waveform(y.astype(np.float32), new_rate)


# ---------------------------------------------------------------------------
# SNR mixing
# ---------------------------------------------------------------------------

def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x.astype(np.float64)))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add noise scaled so the clean:noise power ratio is snr_db decibels.

    The noise is looped or truncated to the clean length.  The sum is clipped
    to [-1, 1] only if it exceeds the range (logged when it happens).
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValidationError("clean and noise sample rates differ")
    if not math.isfinite(snr_db):
        raise ValidationError("snr_db must be finite")
    rms_c = _rms(clean.samples)
    n = noise.samples
    if n.size < clean.samples.size:
        reps = int(math.ceil(clean.samples.size / n.size))
        n = np.tile(n, reps)
    n = n[:clean.samples.size]
    rms_n = _rms(n)
    if rms_c == 0.0 or rms_n == 0.0:
        raise ValidationError("mix_at_snr requires non-silent clean and noise")
    gain = rms_c / (rms_n * 10.0 ** (snr_db / 20.0))
    mixed = clean.samples.astype(np.float64) + gain * n.astype(np.float64)
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        log.warning("mix_at_snr: clipping output (peak %.3f) at snr %.1f dB", peak, snr_db)
        mixed = np.clip(mixed, -1.0, 1.0)
    return Waveform(mixed.astype(np.float32), clean.sample_rate)


def noise_excerpt(noise: Waveform, length: int, offset: int) -> Waveform:
    """Looping excerpt of a noise recording starting at `offset` samples."""
    n = noise.samples
    idx = (offset + np.arange(length)) % n.size
    return Waveform(n[idx], noise.sample_rate)


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

def save_features(path, spec: LogMelSpectrogram):
    """Binary blob: magic, u32 n_mels, u32 n_frames, fp32 row-major data.

    A JSON sidecar (same stem, .json) snapshots the feature config.
    """
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", spec.n_mels, spec.n_frames))
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(spec.config.to_dict(), sort_keys=True))


def load_features(path) -> LogMelSpectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature magic {raw[:4]!r}")
    n_mels, n_frames = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n_mels * n_frames
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated feature blob ({len(raw)} != {expected})")
    data = np.frombuffer(raw, dtype="<f4", count=n_mels * n_frames, offset=12)
    config = FeatureConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    return LogMelSpectrogram(data.reshape(n_mels, n_frames).copy(), config)
