"""Signal-processing kernels against closed-form and brute-force oracles."""

import numpy as np
import pytest

from mtlaug.corpus import Waveform
from mtlaug import dsp
from mtlaug.errors import ValidationError

from _oracles import autocorrelation_pitch, rms

SR = 16000
SMALL = dsp.FeatureConfig(n_mels=40, target_dur_s=1.0)


def tone(freq, dur_s=1.0, amp=0.5, sr=SR):
    t = np.arange(int(dur_s * sr)) / sr
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), sr)


class TestPadOrTruncate:
    def test_long_input_cut_at_target(self):
        wav = tone(440, dur_s=9.0)
        out = dsp.pad_or_truncate(wav, 7.5)
        assert out.samples.size == 120000
        np.testing.assert_array_equal(out.samples, wav.samples[:120000])

    def test_exact_length_unchanged(self):
        wav = tone(440, dur_s=7.5)
        out = dsp.pad_or_truncate(wav, 7.5)
        np.testing.assert_array_equal(out.samples, wav.samples)

    def test_short_input_zero_padded(self):
        wav = tone(440, dur_s=1.0)
        out = dsp.pad_or_truncate(wav, 7.5)
        assert out.samples.size == 120000
        np.testing.assert_array_equal(out.samples[16000:], 0.0)


class TestStft:
    def test_zero_input_zero_magnitudes(self):
        wav = Waveform(np.zeros(SR, dtype=np.float32))
        mag = dsp.stft_magnitude(wav, SMALL)
        np.testing.assert_array_equal(mag, 0.0)

    def test_tone_peaks_at_closed_form_bin(self):
        mag = dsp.stft_magnitude(tone(1000.0), SMALL)
        expected_bin = round(1000 * SMALL.n_fft / SR)
        peak_bins = np.argmax(mag, axis=0)
        assert np.all(np.abs(peak_bins - expected_bin) <= 1)

    def test_parseval_on_one_frame(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=SMALL.win_length).astype(np.float32)
        wav = Waveform(np.concatenate([x, np.zeros(SR - x.size, dtype=np.float32)]))
        windowed = x * np.hamming(SMALL.win_length)
        spectrum = np.fft.fft(windowed, n=SMALL.n_fft)
        direct = np.sum(np.abs(spectrum) ** 2)
        expected = SMALL.n_fft * np.sum(windowed ** 2)
        assert direct == pytest.approx(expected, rel=1e-9)
        mag = dsp.stft_magnitude(wav, SMALL)[:, 0].astype(np.float64)
        half_sum = mag[0] ** 2 + 2 * np.sum(mag[1:-1] ** 2) + mag[-1] ** 2
        assert half_sum == pytest.approx(expected, rel=1e-4)

    def test_too_short_input_rejected(self):
        with pytest.raises(ValidationError):
            dsp.stft_magnitude(Waveform(np.ones(100, dtype=np.float32)), SMALL)


class TestMelFilterbank:
    def test_rows_have_positive_mass(self):
        for n_mels in (40, 128):
            fb = dsp.mel_filterbank(dsp.FeatureConfig(n_mels=n_mels, target_dur_s=1.0))
            assert np.all(fb.sum(axis=1) > 0)
            assert np.all(fb >= 0)

    def test_centers_strictly_increasing(self):
        centers = dsp.mel_center_frequencies(dsp.FeatureConfig())
        assert np.all(np.diff(centers) > 0)

    def test_two_filter_centers_match_hand_formula(self):
        cfg = dsp.FeatureConfig(n_mels=2, target_dur_s=1.0)
        centers = dsp.mel_center_frequencies(cfg)
        mel_max = 2595.0 * np.log10(1.0 + 8000.0 / 700.0)
        hand = [700.0 * (10 ** ((mel_max * k / 3) / 2595.0) - 1.0) for k in (1, 2)]
        np.testing.assert_allclose(centers, hand, rtol=1e-9)


class TestLogMel:
    def test_zero_waveform_hits_log_floor(self):
        spec = dsp.log_mel(Waveform(np.zeros(SR, dtype=np.float32)), SMALL)
        np.testing.assert_allclose(spec.data, np.log(SMALL.log_floor), rtol=1e-5)

    def test_deterministic(self):
        wav = tone(700)
        a = dsp.log_mel(wav, SMALL)
        b = dsp.log_mel(wav, SMALL)
        np.testing.assert_array_equal(a.data, b.data)

    def test_shape_contract(self):
        for dur in (0.3, 1.0, 2.5):
            spec = dsp.log_mel(tone(300, dur_s=dur), SMALL)
            assert spec.data.shape == (SMALL.n_mels, SMALL.n_frames)

    def test_tone_at_filter_center_wins_that_row(self):
        centers = dsp.mel_center_frequencies(SMALL)
        m = 25
        spec = dsp.log_mel(tone(float(centers[m])), SMALL)
        profile = spec.data.mean(axis=1)
        assert abs(int(np.argmax(profile)) - m) <= 1

    def test_frame_count_derivation(self):
        cfg = dsp.FeatureConfig()
        assert cfg.target_length == 120000
        assert cfg.n_frames == 1 + (120000 - 640) // 160


class TestResample:
    def test_identity_factor(self):
        wav = tone(440)
        out = dsp.resample(wav, 1.0)
        assert out.samples.size == wav.samples.size
        assert np.max(np.abs(out.samples - wav.samples)) < 1e-6

    def test_length_at_factor_1_1(self):
        wav = Waveform(np.zeros(120000, dtype=np.float32) + 0.1)
        out = dsp.resample(wav, 1.1)
        assert abs(out.samples.size - 109091) <= 1

    def test_pitch_scales_with_factor(self):
        wav = tone(440, dur_s=1.0)
        out = dsp.resample(wav, 0.9)
        pitch = autocorrelation_pitch(out.samples, SR, fmin=300, fmax=500)
        bin_width = SR / SMALL.n_fft
        assert abs(pitch - 396.0) < bin_width

    def test_invalid_factor(self):
        with pytest.raises(ValidationError):
            dsp.resample(tone(440), float("nan"))
        with pytest.raises(ValidationError):
            dsp.resample(tone(440), -1.0)


class TestMixAtSnr:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        clean = Waveform((0.2 * np.sin(2 * np.pi * 300 * np.arange(SR) / SR)).astype(np.float32))
        noise = Waveform(rng.normal(0, 0.1, size=SR).astype(np.float32))
        return clean, noise

    def test_zero_db_equalizes_rms(self):
        clean, noise = self._pair()
        mixed = dsp.mix_at_snr(clean, noise, 0.0)
        added = mixed.samples.astype(np.float64) - clean.samples.astype(np.float64)
        assert rms(added) == pytest.approx(rms(clean.samples), rel=1e-5)

    def test_20db_noise_is_tenth_of_clean(self):
        clean, noise = self._pair()
        mixed = dsp.mix_at_snr(clean, noise, 20.0)
        added = mixed.samples.astype(np.float64) - clean.samples.astype(np.float64)
        assert rms(added) == pytest.approx(rms(clean.samples) / 10.0, rel=1e-5)

    def test_measured_snr_matches_request(self):
        for snr in (0.0, 10.0, 20.0):
            clean, noise = self._pair(int(snr))
            mixed = dsp.mix_at_snr(clean, noise, snr)
            added = mixed.samples.astype(np.float64) - clean.samples.astype(np.float64)
            measured = 20.0 * np.log10(rms(clean.samples) / rms(added))
            assert measured == pytest.approx(snr, abs=1e-4)

    def test_silence_rejected(self):
        clean, noise = self._pair()
        silent = Waveform(np.zeros(SR, dtype=np.float32) + 0.0)
        with pytest.raises(ValidationError):
            dsp.mix_at_snr(silent, noise, 10.0)
        with pytest.raises(ValidationError):
            dsp.mix_at_snr(clean, silent, 10.0)

    def test_gain_invariant_under_clean_scaling(self):
        clean, noise = self._pair()
        mixed_1 = dsp.mix_at_snr(clean, noise, 10.0)
        scaled = Waveform(clean.samples * 0.5)
        mixed_2 = dsp.mix_at_snr(scaled, noise, 10.0)
        added_1 = mixed_1.samples.astype(np.float64) - clean.samples.astype(np.float64)
        added_2 = mixed_2.samples.astype(np.float64) - scaled.samples.astype(np.float64)
        ratio_1 = rms(clean.samples) / rms(added_1)
        ratio_2 = rms(scaled.samples) / rms(added_2)
        assert ratio_1 == pytest.approx(ratio_2, rel=1e-5)

    def test_noise_looped_to_clean_length(self):
        clean, _ = self._pair()
        short = Waveform(np.float32(0.05) * np.ones(777, dtype=np.float32))
        mixed = dsp.mix_at_snr(clean, short, 5.0)
        assert mixed.samples.size == clean.samples.size


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        spec = dsp.log_mel(tone(500), SMALL)
        path = tmp_path / "u1.lmsp"
        dsp.save_features(path, spec)
        again = dsp.load_features(path)
        np.testing.assert_array_equal(again.data, spec.data)
        assert again.config == spec.config

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "u1.lmsp"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(dsp.FormatError):
            dsp.load_features(path)
