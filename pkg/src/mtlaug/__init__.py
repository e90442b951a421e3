"""Semi-supervised multitask speech emotion recognition.

Auxiliary augmentation-type classification and input reconstruction around a
CNN encoder / BLSTM-attention emotion classifier, with robustness evaluation
protocols (cross-corpus, noisy speech, adversarial attacks) runnable at desk
scale on a bundled synthetic corpus.
"""

__version__ = "0.1.0"

from .corpus import Corpus, SynthConfig, Utterance, Waveform, load_manifest, read_wav, \
    save_manifest, split_loso, split_random, synth_corpus
from .dsp import FeatureConfig, LogMelSpectrogram, log_mel, mel_filterbank, mix_at_snr, \
    pad_or_truncate, resample, stft_magnitude
from .augment import AugmentationPolicy, AugmentationType, AugmentedSample, MixupParams, \
    SpecAugmentParams, build_augmented_set, mixup, spec_augment, speed_perturb
from .model import ConvSpec, Model, ModelConfig, ablation_config, attention_pool, build_model
from .train import MtlLossBreakdown, ScheduleState, TrainConfig, fit, load_checkpoint, \
    mtl_loss, save_checkpoint, train_step
from .attack import AttackParams, bim, fgsm
from .metrics import ConfusionMatrix, uar
from .evaluate import ExperimentReport, ProtocolSetup, adversarial_evaluate, \
    cross_corpus_evaluate, loso_evaluate, noisy_evaluate, study_ablation, \
    study_augmentation_selection, study_label_fraction
from .config import ExperimentConfig, load_config

__all__ = [name for name in dir() if not name.startswith("_")]
