"""Shared fixtures: tiny synthetic corpora and desk-scale configs."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mtlaug import corpus as cp
from mtlaug import dsp
from mtlaug import model as md
from mtlaug.augment import AugmentationPolicy, MixupParams, SpecAugmentParams

TINY_FEATURES = dsp.FeatureConfig(n_mels=24, target_dur_s=0.5)

TINY_MODEL = md.ModelConfig(
    input_mels=24, input_frames=TINY_FEATURES.n_frames,
    encoder=(md.ConvSpec((5, 5), 4, (2, 2)), md.ConvSpec((3, 3), 8, (2, 2))),
    c_e_units=8, c_e_dense=12, c_a_units=8, c_a_dense=12,
)

TINY_POLICY = AugmentationPolicy(
    speed=1, specaugment=1, mixup=1,
    spec_params=SpecAugmentParams(max_freq_width=6, max_time_width=10),
    mixup_params=MixupParams(fixed_lambda=0.5),
)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """16-utterance corpus: 2 speakers x 4 classes x 2, half a second each."""
    out = tmp_path_factory.mktemp("tiny_synth")
    cfg = cp.SynthConfig(n_speakers=2, utterances_per_speaker_per_class=2,
                         duration_s=0.5, seed=42)
    return cp.synth_corpus(cfg, out)


@pytest.fixture(scope="session")
def tiny_unlabeled(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_unlabeled")
    cfg = cp.SynthConfig(n_speakers=2, utterances_per_speaker_per_class=1,
                         duration_s=0.5, seed=43)
    return cp.synth_corpus(cfg, out, name="pool", unlabeled=True)
