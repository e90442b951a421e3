"""Evaluation protocols: within-corpus LOSO, cross-corpus, noisy speech,
adversarial attacks, plus the augmentation-selection, labeled-fraction, and
ablation studies.  Repeats aggregate as mean and sample std of per-repeat UAR.

Folds and repeats are independent tasks seeded by (base seed, repeat, fold),
so results do not depend on how many workers run them.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackParams, attack
from .augment import AugmentationPolicy, extract_features
from .corpus import Corpus, EMOTIONS, Waveform, read_wav, split_loso, split_random, subsample_labeled
from .dsp import FeatureConfig, log_mel, mix_at_snr, noise_excerpt
from .errors import ProtocolError, ValidationError
from .metrics import ConfusionMatrix, uar, weighted_accuracy  # noqa: F401  (re-export)
from .model import Model, ModelConfig, ablation_config
from .train import TrainConfig, fit

log = logging.getLogger(__name__)

REPORT_CSV_COLUMNS = ["protocol", "arm", "repeat", "fold", "uar"]


@dataclass
class ExperimentReport:
    protocol: str
    rows: list[dict] = field(default_factory=list)
    confusions: dict[str, list[list[int]]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    wall_clock_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def add_row(self, arm: str, repeat: int, fold: str, value: float):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"UAR {value} outside [0, 1]")
        self.rows.append({"protocol": self.protocol, "arm": arm, "repeat": repeat,
                          "fold": fold, "uar": value})

    def repeat_uars(self, arm: str) -> list[float]:
        """Per-repeat values: the 'all' fold rows when present, else fold means."""
        repeats = sorted({r["repeat"] for r in self.rows if r["arm"] == arm})
        out = []
        for rep in repeats:
            rows = [r for r in self.rows if r["arm"] == arm and r["repeat"] == rep]
            whole = [r for r in rows if r["fold"] == "all"]
            out.append(whole[0]["uar"] if whole
                       else float(np.mean([r["uar"] for r in rows])))
        return out

    def summary(self) -> dict[str, dict]:
        arms = sorted({r["arm"] for r in self.rows})
        result = {}
        for arm in arms:
            vals = np.array(self.repeat_uars(arm))
            result[arm] = {
                "mean_uar": float(vals.mean()),
                "std_uar": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                "n_repeats": int(vals.size),
            }
        return result

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "protocol": self.protocol,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "rows": self.rows,
            "confusions": self.confusions,
            "summary": self.summary(),
            "wall_clock_s": self.wall_clock_s,
            "meta": self.meta,
        }, indent=1, sort_keys=True))

    def to_csv(self, path):
        lines = [f"# config_hash={self.config_hash} seeds={','.join(map(str, self.seeds))}",
                 ",".join(REPORT_CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join([row["protocol"], row["arm"], str(row["repeat"]),
                                   str(row["fold"]), format(row["uar"], ".8g")]))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ProtocolSetup:
    features: FeatureConfig
    policy: AugmentationPolicy
    model: ModelConfig
    train: TrainConfig


def _derive_seed(*parts) -> int:
    import hashlib
    ints = tuple(p if isinstance(p, int)
                 else int.from_bytes(hashlib.sha256(str(p).encode()).digest()[:8], "little")
                 for p in parts)
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def evaluate_model(model: Model, corpus: Corpus, features_cfg: FeatureConfig,
                   features: dict[str, np.ndarray] | None = None) -> ConfusionMatrix:
    """Clean-feature predictions of labeled utterances into a confusion matrix."""
    labeled = [u for u in corpus.utterances if u.labeled]
    if features is None:
        features = {uid: s.data for uid, s
                    in extract_features(corpus, features_cfg).items()}
    x = np.stack([features[u.id] for u in labeled])[:, None, :, :]
    preds = np.argmax(model.predict_emotion(x), axis=1)
    cm = ConfusionMatrix(len(EMOTIONS))
    cm.add([u.emotion_index for u in labeled], preds)
    return cm


def _check_no_leakage(*corpora: Corpus):
    seen: set[str] = set()
    for c in corpora:
        ids = {u.id for u in c.utterances}
        if ids & seen:
            raise ProtocolError(f"utterance ids leak across splits: {sorted(ids & seen)[:5]}")
        seen |= ids


def _carve_validation(train: Corpus, repeat: int) -> tuple[Corpus, Corpus]:
    """Hold one training speaker out for validation, rotating with the repeat
    index; falls back to a random utterance split when only one speaker
    remains."""
    speakers = sorted(train.speakers)
    if len(speakers) >= 2:
        val_spk = speakers[repeat % len(speakers)]
        val = train.subset(lambda u: u.speaker_id == val_spk, f"{train.name}:val")
        inner = train.subset(lambda u: u.speaker_id != val_spk, f"{train.name}:inner")
        return inner, val
    log.warning("single training speaker; validating on a 25%% utterance split")
    val, inner = split_random(train, 0.25, seed=repeat)
    return inner, val


# ---------------------------------------------------------------------------
# LOSO
# ---------------------------------------------------------------------------

def _loso_task(args):
    (train, test, unlabeled, setup, repeat, fold_idx, base_seed) = args
    seed = _derive_seed(base_seed, repeat, fold_idx)
    inner_train, val = _carve_validation(train, repeat)
    _check_no_leakage(inner_train, val, test)
    model, _ = fit(inner_train, val, unlabeled, setup.features, setup.policy,
                   setup.model, setup.train, seed=seed)
    cm = evaluate_model(model, test, setup.features)
    return repeat, fold_idx, test.speakers[0], seed, cm.to_list()


def _run_tasks(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def loso_evaluate(corpus: Corpus, setup: ProtocolSetup, n_repeats: int = 10,
                  base_seed: int = 0, unlabeled: Corpus | None = None,
                  jobs: int = 1, arm: str = "loso") -> ExperimentReport:
    """Leave-one-speaker-out: each repeat retrains every fold with a fresh
    seed and pools the fold predictions into one confusion per repeat."""
    started = time.time()
    folds = split_loso(corpus.labeled_only())
    report = ExperimentReport(protocol="loso")
    tasks = [(train, test, unlabeled, setup, rep, fi, base_seed)
             for rep in range(n_repeats) for fi, (train, test) in enumerate(folds)]
    results = _run_tasks(_loso_task, tasks, jobs)
    provenance = []
    per_repeat: dict[int, ConfusionMatrix] = {}
    for repeat, fold_idx, speaker, seed, counts in results:
        cm = ConfusionMatrix(len(EMOTIONS), np.asarray(counts))
        report.add_row(arm, repeat, speaker, uar(cm))
        per_repeat.setdefault(repeat, ConfusionMatrix(len(EMOTIONS))).merge(cm)
        provenance.append({"repeat": repeat, "fold": fold_idx, "speaker": speaker,
                           "seed": seed})
        report.seeds.append(seed)
    for repeat, cm in sorted(per_repeat.items()):
        report.add_row(arm, repeat, "all", uar(cm))
        report.confusions[f"{arm}/{repeat}"] = cm.to_list()
    report.meta["models"] = provenance
    report.wall_clock_s = time.time() - started
    return report


# ---------------------------------------------------------------------------
# cross-corpus / cross-language
# ---------------------------------------------------------------------------

def _cross_task(args):
    (source, target, setup, repeat, base_seed, speaker_disjoint) = args
    seed = _derive_seed(base_seed, repeat, 0xC0)
    val, test = split_random(target, 0.30, seed=seed, speaker_disjoint=speaker_disjoint)
    if source.name != target.name:
        _check_no_leakage(source, target)
    model, _ = fit(source, val, None, setup.features, setup.policy,
                   setup.model, setup.train, seed=seed)
    cm = evaluate_model(model, test, setup.features)
    return repeat, seed, cm.to_list()


def cross_corpus_evaluate(source: Corpus, target: Corpus, setup: ProtocolSetup,
                          n_repeats: int = 10, base_seed: int = 0, jobs: int = 1,
                          speaker_disjoint_split: bool = False) -> ExperimentReport:
    """Train on the full source corpus, tune on a random 30% of the target,
    report UAR on the remaining 70%.  The arm records the direction."""
    started = time.time()
    arm = f"{source.name}->{target.name}"
    report = ExperimentReport(protocol="cross_corpus")
    tasks = [(source.labeled_only(), target.labeled_only(), setup, rep, base_seed,
              speaker_disjoint_split) for rep in range(n_repeats)]
    for repeat, seed, counts in _run_tasks(_cross_task, tasks, jobs):
        cm = ConfusionMatrix(len(EMOTIONS), np.asarray(counts))
        report.add_row(arm, repeat, "all", uar(cm))
        report.confusions[f"{arm}/{repeat}"] = cm.to_list()
        report.seeds.append(seed)
    report.wall_clock_s = time.time() - started
    return report


# ---------------------------------------------------------------------------
# noisy and adversarial evaluation of a trained model
# ---------------------------------------------------------------------------

def _model_checksum(model: Model) -> bytes:
    import hashlib
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(model.params[name].data.tobytes())
    return digest.digest()


def noisy_evaluate(model: Model, test: Corpus, noise_pool: list[Waveform],
                   features_cfg: FeatureConfig, snrs=(0.0, 10.0, 20.0),
                   seed: int = 0, include_clean: bool = True) -> ExperimentReport:
    """Mix each test utterance with a random noise excerpt per SNR, then score.

    A non-finite SNR is the clean sentinel.  The model is never retrained.
    """
    if not noise_pool:
        raise ProtocolError("noisy evaluation needs a non-empty noise pool")
    started = time.time()
    checksum = _model_checksum(model)
    report = ExperimentReport(protocol="noisy")
    labeled = [u for u in test.utterances if u.labeled]
    waveforms = {u.id: read_wav(u.audio_path) for u in labeled}
    arms: list[tuple[str, float]] = []
    if include_clean:
        arms.append(("clean", math.inf))
    arms.extend((f"snr_{snr:g}dB", float(snr)) for snr in snrs)
    for arm_idx, (arm, snr) in enumerate(arms):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x905E, arm_idx)))
        cm = ConfusionMatrix(len(EMOTIONS))
        feats = {}
        for u in labeled:
            wav = waveforms[u.id]
            if math.isfinite(snr):
                noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
                excerpt = noise_excerpt(noise, wav.samples.size,
                                        int(rng.integers(0, noise.samples.size)))
                wav = mix_at_snr(wav, excerpt, snr)
            feats[u.id] = log_mel(wav, features_cfg).data
        x = np.stack([feats[u.id] for u in labeled])[:, None, :, :]
        preds = np.argmax(model.predict_emotion(x), axis=1)
        cm.add([u.emotion_index for u in labeled], preds)
        report.add_row(arm, 0, "all", uar(cm))
        report.confusions[f"{arm}/0"] = cm.to_list()
    if _model_checksum(model) != checksum:
        raise ProtocolError("model parameters changed during noisy evaluation")
    report.wall_clock_s = time.time() - started
    return report


def adversarial_evaluate(model: Model, test: Corpus, attack_params: list[AttackParams],
                         features_cfg: FeatureConfig,
                         features: dict[str, np.ndarray] | None = None
                         ) -> ExperimentReport:
    """Clean UAR alongside UAR under each requested attack."""
    started = time.time()
    checksum = _model_checksum(model)
    report = ExperimentReport(protocol="adversarial")
    labeled = [u for u in test.utterances if u.labeled]
    if features is None:
        features = {uid: s.data for uid, s
                    in extract_features(test, features_cfg).items()}
    x = np.stack([features[u.id] for u in labeled])[:, None, :, :]
    y = np.array([u.emotion_index for u in labeled])

    def score(batch: np.ndarray) -> ConfusionMatrix:
        preds = np.argmax(model.predict_emotion(batch), axis=1)
        cm = ConfusionMatrix(len(EMOTIONS))
        cm.add(y, preds)
        return cm

    cm_clean = score(x)
    report.add_row("clean", 0, "all", uar(cm_clean))
    report.confusions["clean/0"] = cm_clean.to_list()
    for params in attack_params:
        x_adv = attack(model, x, y, params)
        cm = score(x_adv)
        arm = f"{params.kind}_eps{params.epsilon:g}"
        report.add_row(arm, 0, "all", uar(cm))
        report.confusions[f"{arm}/0"] = cm.to_list()
    if _model_checksum(model) != checksum:
        raise ProtocolError("model parameters changed during adversarial evaluation")
    report.wall_clock_s = time.time() - started
    return report


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def study_augmentation_selection(corpus: Corpus, setup: ProtocolSetup,
                                 n_repeats: int = 10, base_seed: int = 0,
                                 jobs: int = 1) -> ExperimentReport:
    """Single-augmentation arms (binary auxiliary task) against the full
    four-way policy; same originals, fresh RNG per arm."""
    base_policy = setup.policy
    arms = {
        "speed_only": replace(base_policy, speed=max(2, base_policy.speed),
                              specaugment=0, mixup=0),
        "specaugment_only": replace(base_policy, speed=0,
                                    specaugment=max(1, base_policy.specaugment), mixup=0),
        "mixup_only": replace(base_policy, speed=0, specaugment=0,
                              mixup=max(1, base_policy.mixup)),
        "all": base_policy,
    }
    report = ExperimentReport(protocol="augmentation_selection")
    for arm_idx, (arm, policy) in enumerate(arms.items()):
        arm_setup = replace(setup, policy=policy)
        sub = loso_evaluate(corpus, arm_setup, n_repeats,
                            _derive_seed(base_seed, "aug_arm", arm_idx),
                            jobs=jobs, arm=arm)
        report.rows.extend(r | {"protocol": report.protocol} for r in sub.rows)
        report.confusions.update(sub.confusions)
        report.seeds.extend(sub.seeds)
        report.wall_clock_s += sub.wall_clock_s
    report.meta["arms"] = list(arms)
    return report


def study_label_fraction(corpus: Corpus, setup: ProtocolSetup, fractions,
                         n_repeats: int = 10, base_seed: int = 0,
                         unlabeled_remainder: bool = True, jobs: int = 1
                         ) -> ExperimentReport:
    """UAR as a function of the labeled-data fraction.

    Inside every LOSO fold the training split is speaker-stratified
    subsampled; the dropped utterances optionally feed the unlabeled pool.
    """
    started = time.time()
    folds = split_loso(corpus.labeled_only())
    report = ExperimentReport(protocol="label_fraction")
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValidationError(f"labeled fraction {fraction} outside (0, 1]")
        arm = f"frac_{fraction:g}"
        tasks = []
        for rep in range(n_repeats):
            for fi, (train, test) in enumerate(folds):
                tasks.append((train, test, fraction, setup, rep, fi, base_seed,
                              unlabeled_remainder))
        results = _run_tasks(_fraction_task, tasks, jobs)
        per_repeat: dict[int, ConfusionMatrix] = {}
        for repeat, fold_idx, speaker, seed, counts in results:
            cm = ConfusionMatrix(len(EMOTIONS), np.asarray(counts))
            report.add_row(arm, repeat, speaker, uar(cm))
            per_repeat.setdefault(repeat, ConfusionMatrix(len(EMOTIONS))).merge(cm)
            report.seeds.append(seed)
        for repeat, cm in sorted(per_repeat.items()):
            report.add_row(arm, repeat, "all", uar(cm))
            report.confusions[f"{arm}/{repeat}"] = cm.to_list()
    report.meta["fractions"] = [float(f) for f in fractions]
    report.wall_clock_s = time.time() - started
    return report


def _fraction_task(args):
    (train, test, fraction, setup, repeat, fold_idx, base_seed, unlabeled_remainder) = args
    seed = _derive_seed(base_seed, repeat, fold_idx)
    inner_train, val = _carve_validation(train, repeat)
    kept, rest = subsample_labeled(inner_train, fraction, seed)
    pool = rest if (unlabeled_remainder and len(rest)) else None
    _check_no_leakage(kept, val, test)
    model, _ = fit(kept, val, pool, setup.features, setup.policy,
                   setup.model, setup.train, seed=seed)
    cm = evaluate_model(model, test, setup.features)
    return repeat, fold_idx, test.speakers[0], seed, cm.to_list()


def study_ablation(corpus: Corpus, setup: ProtocolSetup, cross_target: Corpus | None = None,
                   n_repeats: int = 10, base_seed: int = 0, jobs: int = 1
                   ) -> ExperimentReport:
    """The five-row configuration matrix on within-corpus (and optionally
    cross-corpus) protocols."""
    report = ExperimentReport(protocol="ablation")
    matrix = []
    for model_id in range(1, 6):
        mcfg = ablation_config(setup.model, model_id)
        # models without any auxiliary task train on plain data, like the
        # baseline rows they stand for
        policy = setup.policy if mcfg.uses_aux \
            else replace(setup.policy, speed=0, specaugment=0, mixup=0)
        arm_setup = replace(setup, model=mcfg, policy=policy)
        arm = f"model_{model_id}"
        within = loso_evaluate(corpus, arm_setup, n_repeats,
                               _derive_seed(base_seed, "ablation", model_id),
                               jobs=jobs, arm=f"{arm}/within")
        report.rows.extend(r | {"protocol": report.protocol} for r in within.rows)
        report.confusions.update(within.confusions)
        report.seeds.extend(within.seeds)
        report.wall_clock_s += within.wall_clock_s
        row = {
            "model": model_id,
            "aux_augtype": mcfg.use_aux_augtype,
            "aux_reconstruction": mcfg.use_aux_reconstruction,
            "center_loss": mcfg.use_center_loss,
            "attention": mcfg.use_attention,
            "within_mean_uar": float(np.mean(within.repeat_uars(f"{arm}/within"))),
        }
        if cross_target is not None:
            cross = cross_corpus_evaluate(
                corpus, cross_target, arm_setup, n_repeats,
                _derive_seed(base_seed, "ablation_cross", model_id), jobs=jobs)
            cross_arm = f"{corpus.name}->{cross_target.name}"
            for r in cross.rows:
                report.rows.append({"protocol": report.protocol, "arm": f"{arm}/cross",
                                    "repeat": r["repeat"], "fold": r["fold"],
                                    "uar": r["uar"]})
            report.seeds.extend(cross.seeds)
            report.wall_clock_s += cross.wall_clock_s
            row["cross_mean_uar"] = float(np.mean(cross.repeat_uars(cross_arm)))
        matrix.append(row)
    report.meta["matrix"] = matrix
    return report


# ---------------------------------------------------------------------------
# report merging
# ---------------------------------------------------------------------------

def merge_reports(paths) -> dict:
    """Combine run JSONs into per-protocol summary tables."""
    merged: dict[str, dict] = {}
    for path in paths:
        payload = json.loads(Path(path).read_text())
        proto = payload["protocol"]
        entry = merged.setdefault(proto, {"arms": {}, "sources": []})
        entry["sources"].append(str(path))
        for arm, stats in payload["summary"].items():
            entry["arms"][arm] = {
                "mean_uar_pct": 100.0 * stats["mean_uar"],
                "std_uar_pct": 100.0 * stats["std_uar"],
                "n_repeats": stats["n_repeats"],
            }
        if "matrix" in payload.get("meta", {}):
            entry["matrix"] = payload["meta"]["matrix"]
    return merged


def format_merged(merged: dict) -> str:
    lines = []
    for proto in sorted(merged):
        lines.append(f"== {proto} ==")
        for arm in sorted(merged[proto]["arms"]):
            stats = merged[proto]["arms"][arm]
            lines.append(f"  {arm:30s} {stats['mean_uar_pct']:5.1f} "
                         f"+/- {stats['std_uar_pct']:4.1f}  (n={stats['n_repeats']})")
        if "matrix" in merged[proto]:
            lines.append("  model  augtype  recon  center  attention  within"
                         + ("  cross" if "cross_mean_uar" in merged[proto]["matrix"][0] else ""))
            for row in merged[proto]["matrix"]:
                cells = [f"  {row['model']:>5d}",
                         f"{str(row['aux_augtype']):>7s}",
                         f"{str(row['aux_reconstruction']):>6s}",
                         f"{str(row['center_loss']):>7s}",
                         f"{str(row['attention']):>10s}",
                         f"{100 * row['within_mean_uar']:6.1f}"]
                if "cross_mean_uar" in row:
                    cells.append(f"{100 * row['cross_mean_uar']:6.1f}")
                lines.append(" ".join(cells))
    return "\n".join(lines)
