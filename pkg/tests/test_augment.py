"""Augmentation transforms and type-labeled set construction."""

import numpy as np
import pytest

from mtlaug import augment as ag
from mtlaug import corpus as cp
from mtlaug import dsp
from mtlaug.errors import ProtocolError, ValidationError

CFG = dsp.FeatureConfig(n_mels=24, target_dur_s=0.5)


def toy_spec(seed=0, n_mels=24):
    rng = np.random.default_rng(seed)
    cfg = dsp.FeatureConfig(n_mels=n_mels, target_dur_s=0.5)
    return dsp.LogMelSpectrogram(rng.normal(size=(n_mels, cfg.n_frames)).astype(np.float32), cfg)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    cfg = cp.SynthConfig(n_speakers=2, utterances_per_speaker_per_class=2,
                         duration_s=0.5, seed=11)
    return cp.synth_corpus(cfg, out)


class TestSpeedPerturb:
    def test_factor_one_preserves_features(self, tiny_corpus):
        wav = cp.read_wav(tiny_corpus.utterances[0].audio_path)
        base = dsp.log_mel(wav, CFG)
        same = dsp.log_mel(ag.speed_perturb(wav, 1.0), CFG)
        assert np.max(np.abs(base.data - same.data)) < 1e-6

    def test_two_copies_at_both_factors(self, tiny_corpus):
        policy = ag.AugmentationPolicy(include_none=False, speed=2, specaugment=0, mixup=0)
        rng = np.random.default_rng(0)
        sub = cp.Corpus(tiny_corpus.utterances[:1], "one")
        samples = ag.build_augmented_set(sub, policy, CFG, rng)
        assert len(samples) == 2
        assert all(s.aug_type == ag.AugmentationType.speed for s in samples)

    def test_duration_arithmetic_for_slowdown(self):
        wav = cp.Waveform(np.random.default_rng(0).normal(0, 0.1, 120000).astype(np.float32))
        warped = ag.speed_perturb(wav, 0.9)
        assert abs(warped.duration_s - 7.5 / 0.9) < 1e-3
        fixed = dsp.pad_or_truncate(warped, 7.5)
        assert fixed.samples.size == 120000


class TestSpecAugment:
    def test_zero_widths_identity(self):
        spec = toy_spec()
        params = ag.SpecAugmentParams(max_freq_width=0, max_time_width=0)
        out = ag.spec_augment(spec, params, np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, spec.data)

    def test_forced_mask_touches_exact_rows(self):
        spec = toy_spec()
        out = ag.apply_masks(spec, freq_masks=[(5, 10)], time_masks=[], mask_value=0.0)
        np.testing.assert_array_equal(out.data[5:15, :], 0.0)
        np.testing.assert_array_equal(out.data[:5, :], spec.data[:5, :])
        np.testing.assert_array_equal(out.data[15:, :], spec.data[15:, :])

    def test_unmasked_cells_bit_identical(self):
        spec = toy_spec(3)
        rng = np.random.default_rng(5)
        for _ in range(50):
            masks_f, masks_t = ag.sample_masks(spec.data.shape, ag.SpecAugmentParams(8, 10), rng)
            out = ag.apply_masks(spec, masks_f, masks_t)
            untouched = np.ones(spec.data.shape, dtype=bool)
            for f0, f in masks_f:
                untouched[f0:f0 + f, :] = False
            for t0, t in masks_t:
                untouched[:, t0:t0 + t] = False
            np.testing.assert_array_equal(out.data[untouched], spec.data[untouched])

    def test_input_not_mutated(self):
        spec = toy_spec(4)
        before = spec.data.copy()
        ag.spec_augment(spec, ag.SpecAugmentParams(8, 8), np.random.default_rng(1))
        np.testing.assert_array_equal(spec.data, before)

    def test_mask_bounds_over_many_draws(self):
        v, tau = 24, 31
        params = ag.SpecAugmentParams(max_freq_width=24, max_time_width=31)
        rng = np.random.default_rng(9)
        for _ in range(10_000):
            masks_f, masks_t = ag.sample_masks((v, tau), params, rng)
            for f0, f in masks_f:
                assert 0 <= f <= 24 and f0 >= 0 and f0 + f <= v
            for t0, t in masks_t:
                assert 0 <= t <= 31 and t0 >= 0 and t0 + t <= tau

    def test_oversized_mask_rejected(self):
        spec = toy_spec()
        params = ag.SpecAugmentParams(max_freq_width=100, max_time_width=1)
        with pytest.raises(ValidationError):
            ag.spec_augment(spec, params, np.random.default_rng(0))

    def test_default_mask_value_is_mean(self):
        spec = toy_spec(6)
        out = ag.apply_masks(spec, freq_masks=[(0, 4)], time_masks=[])
        np.testing.assert_allclose(out.data[:4, :], spec.data.mean(), rtol=1e-6)


class TestMixup:
    def _pair(self):
        a = (toy_spec(1), ag.one_hot("angry"), "ua")
        b = (toy_spec(2), ag.one_hot("sad"), "ub")
        return a, b

    def test_lambda_one_returns_first_exactly(self):
        a, b = self._pair()
        out = ag.mixup(a, b, 1.0)
        np.testing.assert_array_equal(out.features.data, a[0].data)
        np.testing.assert_array_equal(out.emotion_label, a[1])

    def test_lambda_zero_returns_second_exactly(self):
        a, b = self._pair()
        out = ag.mixup(a, b, 0.0)
        np.testing.assert_array_equal(out.features.data, b[0].data)
        np.testing.assert_array_equal(out.emotion_label, b[1])

    def test_half_mix_soft_label(self):
        a, b = self._pair()
        out = ag.mixup(a, b, 0.5)
        np.testing.assert_allclose(out.emotion_label, [0.5, 0.0, 0.0, 0.5], atol=1e-7)

    def test_convex_hull_elementwise(self):
        a, b = self._pair()
        rng = np.random.default_rng(0)
        for lam in rng.uniform(0, 1, size=20):
            out = ag.mixup(a, b, float(lam))
            lo = np.minimum(a[0].data, b[0].data)
            hi = np.maximum(a[0].data, b[0].data)
            assert np.all(out.features.data >= lo - 1e-6)
            assert np.all(out.features.data <= hi + 1e-6)

    def test_symmetry_bit_for_bit(self):
        a, b = self._pair()
        for lam in (0.25, 0.5, 0.75):
            ab = ag.mixup(a, b, lam)
            ba = ag.mixup(b, a, 1.0 - lam)
            np.testing.assert_array_equal(ab.features.data, ba.features.data)
            np.testing.assert_array_equal(ab.emotion_label, ba.emotion_label)

    def test_shape_mismatch_rejected(self):
        a = (toy_spec(1, n_mels=24), ag.one_hot("angry"), "ua")
        b = (toy_spec(2, n_mels=12), ag.one_hot("sad"), "ub")
        with pytest.raises(ValidationError):
            ag.mixup(a, b, 0.5)

    def test_source_ids_recorded(self):
        a, b = self._pair()
        out = ag.mixup(a, b, 0.3)
        assert out.source_ids == ("ua", "ub")


class TestBuildAugmentedSet:
    def test_type_histogram(self, tiny_corpus):
        policy = ag.AugmentationPolicy(speed=2, specaugment=1, mixup=1,
                                       spec_params=ag.SpecAugmentParams(8, 8))
        samples = ag.build_augmented_set(tiny_corpus, policy, CFG, np.random.default_rng(0))
        n = len(tiny_corpus)
        hist = {t: 0 for t in ag.AugmentationType}
        for s in samples:
            hist[s.aug_type] += 1
        assert hist[ag.AugmentationType.none] == n
        assert hist[ag.AugmentationType.speed] == 2 * n
        assert hist[ag.AugmentationType.specaugment] == n
        assert hist[ag.AugmentationType.mixup] == n
        assert len(samples) == 5 * n

    def test_single_augmentation_arm_is_binary(self):
        policy = ag.AugmentationPolicy(speed=0, specaugment=0, mixup=1)
        assert policy.active_types() == (ag.AugmentationType.none, ag.AugmentationType.mixup)
        assert policy.n_aug_classes == 2
        assert policy.label_index(ag.AugmentationType.mixup) == 1

    def test_full_policy_covers_four_classes(self, tiny_corpus):
        policy = ag.AugmentationPolicy(spec_params=ag.SpecAugmentParams(8, 8))
        samples = ag.build_augmented_set(tiny_corpus, policy, CFG, np.random.default_rng(1))
        seen = {policy.label_index(s.aug_type) for s in samples}
        assert seen == {0, 1, 2, 3}

    def test_unlabeled_gets_no_mixup(self, tiny_corpus, tmp_path):
        pool = tiny_corpus.as_unlabeled("pool")
        mixed = cp.Corpus(tiny_corpus.utterances[:2] + pool.utterances[2:4], "mixed")
        policy = ag.AugmentationPolicy(speed=1, specaugment=1, mixup=1,
                                       spec_params=ag.SpecAugmentParams(8, 8))
        samples = ag.build_augmented_set(mixed, policy, CFG, np.random.default_rng(2))
        for s in samples:
            if s.aug_type == ag.AugmentationType.mixup:
                assert s.labeled
        unlabeled = [s for s in samples if not s.labeled]
        assert unlabeled and all(
            s.aug_type != ag.AugmentationType.mixup for s in unlabeled)

    def test_mixup_needs_two_labeled(self, tiny_corpus):
        single = cp.Corpus(tiny_corpus.utterances[:1], "single")
        policy = ag.AugmentationPolicy(mixup=1)
        with pytest.raises(ProtocolError):
            ag.build_augmented_set(single, policy, CFG, np.random.default_rng(0))

    def test_aug_type_matches_transform(self, tiny_corpus):
        policy = ag.AugmentationPolicy(speed=1, specaugment=0, mixup=0)
        samples = ag.build_augmented_set(tiny_corpus, policy, CFG, np.random.default_rng(3))
        base = {s.source_ids[0]: s for s in samples if s.aug_type == ag.AugmentationType.none}
        for s in samples:
            if s.aug_type == ag.AugmentationType.speed:
                assert not np.array_equal(s.features.data, base[s.source_ids[0]].features.data)


class TestAugmentedCache:
    def test_round_trip(self, tmp_path):
        sample = ag.AugmentedSample(toy_spec(7), ag.one_hot("happy"),
                                    ag.AugmentationType.specaugment, ("u9",))
        path = tmp_path / "u9_spec.lmsa"
        ag.save_augmented(path, sample)
        again = ag.load_augmented(path)
        np.testing.assert_array_equal(again.features.data, sample.features.data)
        assert again.aug_type == sample.aug_type
        assert again.source_ids == sample.source_ids
        np.testing.assert_array_equal(again.emotion_label, sample.emotion_label)

    def test_unlabeled_round_trip(self, tmp_path):
        sample = ag.AugmentedSample(toy_spec(8), None, ag.AugmentationType.none, ("u1",))
        path = tmp_path / "u1.lmsa"
        ag.save_augmented(path, sample)
        assert ag.load_augmented(path).emotion_label is None
