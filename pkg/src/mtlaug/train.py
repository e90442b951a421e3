"""Multitask training loop.

Combined loss = primary (cross entropy + weighted center loss) plus weighted
auxiliary terms (augmentation-type cross entropy + reconstruction error).
Unlabeled batches drive only the auxiliary heads; the emotion classifier and
its class centers are never touched by them.  Learning-rate schedule: halve
and restore the best snapshot after a patience-long validation plateau, stop
once the rate drops below the floor.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentationPolicy, AugmentedSample, build_augmented_set, extract_features, load_waveforms
from .checkpoint import load_container, save_container
from .corpus import Corpus, EMOTIONS
from .dsp import FeatureConfig
from .errors import ConfigMismatchError, ProtocolError, UsageError, ValidationError
from .metrics import ConfusionMatrix, uar, weighted_accuracy
from .model import Model, ModelConfig, build_model

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "lr", "l_mt", "l_pri", "l_s", "l_c", "l_augtype",
                   "l_recon", "val_uar"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 5
    min_lr: float = 1e-5
    unlabeled_ratio: int = 1
    val_metric: str = "uar"  # or "wa"
    normalize_inputs: bool = True
    regenerate_augmented_per_epoch: bool = False
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.val_metric not in ("uar", "wa"):
            raise ValidationError("val_metric must be 'uar' or 'wa'")


@dataclass(frozen=True)
class MtlLossBreakdown:
    l_mt: float
    l_pri: float
    l_s: float
    l_c: float
    l_aux: float
    l_augtype: float
    l_recon: float
    lambda1: float
    lambda2: float


@dataclass
class Batch:
    x: np.ndarray                    # (N, 1, mels, frames)
    emotion: np.ndarray | None       # (N, 4) soft labels, None for unlabeled
    aug_labels: np.ndarray           # (N,) auxiliary class indices
    hard_mask: np.ndarray            # (N,) rows with a single-class identity
    source_ids: tuple[tuple[str, ...], ...]

    @property
    def mode(self) -> str:
        return "labeled" if self.emotion is not None else "unlabeled"


def make_batch(samples: list[AugmentedSample], policy: AugmentationPolicy) -> Batch:
    labeled_flags = {s.labeled for s in samples}
    if len(labeled_flags) != 1:
        raise UsageError("batches must be all-labeled or all-unlabeled")
    x = np.stack([s.features.data for s in samples])[:, None, :, :]
    aug = np.array([policy.label_index(s.aug_type) for s in samples], dtype=np.int64)
    hard = np.array([s.has_hard_label for s in samples], dtype=bool)
    ids = tuple(s.source_ids for s in samples)
    if labeled_flags == {True}:
        y = np.stack([s.emotion_label for s in samples])
        return Batch(x, y, aug, hard, ids)
    return Batch(x, None, aug, hard, ids)


def _forward_losses(batch: Batch, model: Model, mode: str, train: bool,
                    rng: np.random.Generator | None):
    if mode not in ("labeled", "unlabeled"):
        raise UsageError(f"unknown mode {mode!r}")
    if batch.mode != mode:
        raise UsageError(f"{mode} step got a {batch.mode} batch")
    cfg = model.config
    lam1, lam2 = cfg.lambda1, cfg.lambda2

    x_t, latent_map, seq = model.encode(batch.x)
    zero = ad.Tensor(np.zeros(()))
    l_s = l_c = l_augtype = l_recon = zero
    feats = None

    if mode == "labeled":
        logits, feats = model.classify_emotion(seq)
        l_s = ad.softmax_cross_entropy(logits, batch.emotion)
        if cfg.use_center_loss and np.any(batch.hard_mask):
            rows = np.flatnonzero(batch.hard_mask)
            hard_classes = np.argmax(batch.emotion[rows], axis=1)
            l_c = ad.center_loss(ad.take_rows(feats, rows), hard_classes, model.centers)

    if cfg.use_aux_augtype:
        aug_logits = model.classify_augtype(seq, train=train, rng=rng)
        targets = np.eye(cfg.n_aug_classes, dtype=np.float32)[batch.aug_labels]
        l_augtype = ad.softmax_cross_entropy(aug_logits, targets)
    if cfg.use_aux_reconstruction:
        l_recon = ad.mse(model.normalized_input(x_t), model.decode(latent_map))

    l_aux = ad.add(l_augtype, l_recon)
    l_pri = ad.add(l_s, ad.scale(l_c, lam2))
    total = ad.add(l_pri, ad.scale(l_aux, lam1))

    f_s, f_c = l_s.item(), l_c.item()
    f_aug, f_rec = l_augtype.item(), l_recon.item()
    f_aux = f_aug + f_rec
    f_pri = f_s + lam2 * f_c
    breakdown = MtlLossBreakdown(f_pri + lam1 * f_aux, f_pri, f_s, f_c, f_aux,
                                 f_aug, f_rec, lam1, lam2)
    return total, breakdown, feats


def mtl_loss(batch: Batch, model: Model, mode: str, train: bool = True,
             rng: np.random.Generator | None = None) -> tuple[ad.Tensor, MtlLossBreakdown]:
    """Assemble the combined loss graph and its scalar breakdown.

    Labeled mode computes every term; unlabeled mode computes only the
    auxiliary terms (the primary ones are zero by construction).
    """
    total, breakdown, _ = _forward_losses(batch, model, mode, train, rng)
    return total, breakdown


def train_step(batch: Batch, model: Model, opt: ad.AdamState, mode: str,
               rng: np.random.Generator) -> MtlLossBreakdown:
    """One optimization step over the parameters the mode permits.

    Unlabeled steps may move the encoder, decoder, and augmentation-type
    classifier, never the emotion classifier or its centers.  Centers move
    after the optimizer step, using the batch features from the forward pass.
    """
    model.zero_grads()
    loss, breakdown, feats = _forward_losses(batch, model, mode, True, rng)
    ad.backward(loss)
    reachable = {n for n, p in model.params.items() if p.grad is not None}
    if mode == "unlabeled":
        forbidden = model.param_names("c_e")
        leaked = reachable & forbidden
        if leaked:
            raise UsageError(f"unlabeled loss reached emotion-classifier params: {sorted(leaked)}")
        reachable -= forbidden
    ad.adam_step(model.params, opt, allowed=reachable)
    if mode == "labeled" and model.config.use_center_loss and np.any(batch.hard_mask):
        rows = np.flatnonzero(batch.hard_mask)
        hard_classes = np.argmax(batch.emotion[rows], axis=1)
        model.centers += ad.center_deltas(feats.data[rows], hard_classes, model.centers,
                                          model.config.center_alpha)
    model.zero_grads()
    return breakdown


@dataclass
class ScheduleEvent:
    improved: bool
    halved: bool
    halted: bool


class ScheduleState:
    """Plateau schedule: halve the rate and restore the best snapshot after
    `patience` consecutive non-improving epochs; halt below the floor.

    An epoch that exactly ties the best score is not an improvement (the
    plateau counter advances) but does refresh the snapshot, so among
    equally-best epochs the latest one is kept.
    """

    def __init__(self, lr: float, patience: int = 5, min_lr: float = 1e-5):
        self.lr = float(lr)
        self.patience = patience
        self.min_lr = min_lr
        self.best_val_uar = -math.inf
        self.epochs_since_improve = 0
        self.best_snapshot: dict[str, np.ndarray] | None = None
        self.halt = False

    def observe(self, val_score: float, snapshot: dict[str, np.ndarray] | None = None
                ) -> ScheduleEvent:
        if val_score > self.best_val_uar:
            self.best_val_uar = float(val_score)
            if snapshot is not None:
                self.best_snapshot = snapshot
            self.epochs_since_improve = 0
            return ScheduleEvent(True, False, False)
        if val_score == self.best_val_uar and snapshot is not None:
            self.best_snapshot = snapshot
        self.epochs_since_improve += 1
        if self.epochs_since_improve >= self.patience:
            self.lr /= 2.0
            self.epochs_since_improve = 0
            if self.lr < self.min_lr:
                self.halt = True
            return ScheduleEvent(False, True, self.halt)
        return ScheduleEvent(False, False, False)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    unlabeled_rows: list[dict] = field(default_factory=list)

    def to_csv(self, path, header_comment: str | None = None):
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append(",".join(HISTORY_COLUMNS))
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in HISTORY_COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n")

    def to_json(self, path):
        Path(path).write_text(json.dumps(
            {"labeled": self.rows, "unlabeled": self.unlabeled_rows}, indent=1))


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".8g")
    return str(v)


def _mean_breakdowns(breakdowns: list[MtlLossBreakdown]) -> dict:
    if not breakdowns:
        return {k: 0.0 for k in ("l_mt", "l_pri", "l_s", "l_c", "l_augtype", "l_recon")}
    return {k: float(np.mean([getattr(b, k) for b in breakdowns]))
            for k in ("l_mt", "l_pri", "l_s", "l_c", "l_augtype", "l_recon")}


def setup_hash(feature_config: FeatureConfig, policy: AugmentationPolicy,
               model_config: ModelConfig, train_config: TrainConfig) -> str:
    payload = json.dumps({
        "features": feature_config.to_dict(),
        "policy": asdict(policy),
        "model": model_config.to_dict(),
        "train": asdict(train_config),
    }, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def predict_corpus(model: Model, features: dict[str, np.ndarray], ids: list[str]
                   ) -> np.ndarray:
    x = np.stack([features[i] for i in ids])[:, None, :, :]
    return np.argmax(model.predict_emotion(x), axis=1)


def validation_score(model: Model, val_features: dict[str, np.ndarray],
                     val_corpus: Corpus, metric: str) -> float:
    labeled = [u for u in val_corpus.utterances if u.labeled]
    preds = predict_corpus(model, val_features, [u.id for u in labeled])
    cm = ConfusionMatrix(len(EMOTIONS))
    cm.add([u.emotion_index for u in labeled], preds)
    return uar(cm) if metric == "uar" else weighted_accuracy(cm)


def fit(train_corpus: Corpus, val_corpus: Corpus, unlabeled_corpus: Corpus | None,
        feature_config: FeatureConfig, policy: AugmentationPolicy,
        model_config: ModelConfig, train_config: TrainConfig, seed: int = 0,
        checkpoint_path=None, resume_from=None, stop_after_epoch: int | None = None
        ) -> tuple[Model, History]:
    """Train on labeled (and optionally unlabeled) data, tracking validation.

    Returns the best-validation model.  `checkpoint_path` enables end-of-epoch
    checkpoints; `resume_from` continues a run bit-exactly; `stop_after_epoch`
    truncates the loop (used to exercise interrupt/resume).
    """
    if len(train_corpus) == 0 or len(val_corpus) == 0:
        raise ProtocolError("fit needs non-empty train and validation corpora")

    mcfg = replace(model_config, input_mels=feature_config.n_mels,
                   input_frames=feature_config.n_frames,
                   n_aug_classes=policy.n_aug_classes)
    run_hash = setup_hash(feature_config, policy, mcfg, train_config)

    data_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    train_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7EA1)))

    train_waveforms = load_waveforms(train_corpus)
    train_features = extract_features(train_corpus, feature_config, train_waveforms)
    val_features = {uid: spec.data for uid, spec
                    in extract_features(val_corpus, feature_config).items()}
    labeled_samples = build_augmented_set(train_corpus, policy, feature_config,
                                          data_rng, train_waveforms, train_features)
    unlabeled_samples: list[AugmentedSample] = []
    if unlabeled_corpus is not None and len(unlabeled_corpus) > 0:
        pool = unlabeled_corpus.as_unlabeled()
        pool_policy = replace(policy, mixup=0)
        unlabeled_samples = build_augmented_set(pool, pool_policy, feature_config, data_rng)

    model = build_model(mcfg, seed)
    if train_config.normalize_inputs:
        cells = np.concatenate([spec.data.reshape(-1) for spec in train_features.values()])
        model.input_mean = float(cells.mean())
        model.input_std = float(cells.std()) or 1.0

    opt = ad.AdamState(lr=train_config.lr)
    schedule = ScheduleState(train_config.lr, train_config.patience, train_config.min_lr)
    history = History()
    start_epoch = 0

    if resume_from is not None:
        start_epoch = _load_training_state(resume_from, run_hash, model, opt,
                                           schedule, history, train_rng) + 1

    for epoch in range(start_epoch, train_config.max_epochs):
        if schedule.halt:
            break
        opt.lr = schedule.lr
        order = train_rng.permutation(len(labeled_samples))
        if unlabeled_samples:
            u_order = train_rng.permutation(len(unlabeled_samples))
            u_pos = 0
        labeled_break, unlabeled_break = [], []
        bs = train_config.batch_size
        for lo in range(0, len(order), bs):
            chunk = [labeled_samples[i] for i in order[lo:lo + bs]]
            labeled_break.append(train_step(make_batch(chunk, policy), model, opt,
                                            "labeled", train_rng))
            if unlabeled_samples:
                for _ in range(train_config.unlabeled_ratio):
                    take = [unlabeled_samples[u_order[(u_pos + k) % len(u_order)]]
                            for k in range(bs)]
                    u_pos += bs
                    unlabeled_break.append(train_step(make_batch(take, policy), model,
                                                      opt, "unlabeled", train_rng))
        val_score = validation_score(model, val_features, val_corpus,
                                     train_config.val_metric)
        event = schedule.observe(val_score, model.snapshot())
        if event.halved and schedule.best_snapshot is not None:
            model.restore(schedule.best_snapshot)
        row = {"epoch": epoch, "lr": opt.lr, "val_uar": val_score,
               **_mean_breakdowns(labeled_break)}
        history.rows.append(row)
        if unlabeled_break:
            history.unlabeled_rows.append(
                {"epoch": epoch, **_mean_breakdowns(unlabeled_break)})
        log.info("epoch %d lr %.3g l_mt %.4f val %.4f", epoch, opt.lr,
                 row["l_mt"], val_score)
        should_checkpoint = checkpoint_path is not None and (
            (train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0)
            or epoch == stop_after_epoch)
        if should_checkpoint:
            _save_training_state(checkpoint_path, run_hash, model, opt, schedule,
                                 history, train_rng, epoch)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
        if event.halted:
            break

    if schedule.best_snapshot is not None:
        model.restore(schedule.best_snapshot)
    return model, history


# ---------------------------------------------------------------------------
# checkpoint save/load
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, opt: ad.AdamState | None = None,
                    schedule: ScheduleState | None = None, extra_meta: dict | None = None,
                    run_hash: str = ""):
    arrays = {f"param.{n}": p.data for n, p in model.params.items()}
    if model.centers is not None:
        arrays["param.centers"] = model.centers
    arrays["param.input_stats"] = np.array([model.input_mean, model.input_std])
    meta = {
        "run_hash": run_hash,
        "model_config": model.config.to_dict(),
        "model_seed": model.seed,
    }
    if opt is not None:
        arrays.update({f"adam.m.{n}": v for n, v in opt.m.items()})
        arrays.update({f"adam.v.{n}": v for n, v in opt.v.items()})
        meta["adam"] = {"lr": opt.lr, "step_count": opt.step_count,
                        "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    if schedule is not None:
        meta["schedule"] = {
            "lr": schedule.lr, "patience": schedule.patience, "min_lr": schedule.min_lr,
            "best_val_uar": schedule.best_val_uar,
            "epochs_since_improve": schedule.epochs_since_improve,
            "halt": schedule.halt,
            "has_best": schedule.best_snapshot is not None,
        }
        if schedule.best_snapshot is not None:
            arrays.update({f"best.{n}": v for n, v in schedule.best_snapshot.items()})
    meta.update(extra_meta or {})
    save_container(path, arrays, meta)


def load_checkpoint(path, expect_run_hash: str | None = None) -> tuple[Model, dict, dict]:
    """Rebuild the model from a container; returns (model, arrays, meta)."""
    arrays, meta = load_container(path)
    if expect_run_hash is not None and meta.get("run_hash") != expect_run_hash:
        raise ConfigMismatchError(
            f"checkpoint was written under config {meta.get('run_hash')}, "
            f"expected {expect_run_hash}")
    mcfg = ModelConfig.from_dict(meta["model_config"])
    model = build_model(mcfg, meta.get("model_seed", 0))
    for name, p in model.params.items():
        p.data = arrays[f"param.{name}"].astype(p.data.dtype)
    if model.centers is not None:
        model.centers = arrays["param.centers"].copy()
    model.input_mean, model.input_std = (float(v) for v in arrays["param.input_stats"])
    return model, arrays, meta


def _save_training_state(path, run_hash: str, model: Model, opt: ad.AdamState,
                         schedule: ScheduleState, history: History,
                         train_rng: np.random.Generator, epoch: int):
    rng_state = json.dumps(train_rng.bit_generator.state)
    save_checkpoint(path, model, opt, schedule,
                    extra_meta={"epoch": epoch, "rng_state": rng_state,
                                "history": {"labeled": history.rows,
                                            "unlabeled": history.unlabeled_rows}},
                    run_hash=run_hash)


def _load_training_state(path, run_hash: str, model: Model, opt: ad.AdamState,
                         schedule: ScheduleState, history: History,
                         train_rng: np.random.Generator) -> int:
    arrays, meta = load_container(path)
    if meta.get("run_hash") != run_hash:
        raise ConfigMismatchError(
            f"cannot resume: checkpoint config {meta.get('run_hash')} != {run_hash}")
    for name, p in model.params.items():
        p.data = arrays[f"param.{name}"].astype(p.data.dtype)
    if model.centers is not None:
        model.centers = arrays["param.centers"].copy()
    model.input_mean, model.input_std = (float(v) for v in arrays["param.input_stats"])
    adam_meta = meta["adam"]
    opt.lr = adam_meta["lr"]
    opt.step_count = adam_meta["step_count"]
    for key, arr in arrays.items():
        if key.startswith("adam.m."):
            opt.m[key[len("adam.m."):]] = arr.copy()
        elif key.startswith("adam.v."):
            opt.v[key[len("adam.v."):]] = arr.copy()
    sched_meta = meta["schedule"]
    schedule.lr = sched_meta["lr"]
    schedule.best_val_uar = sched_meta["best_val_uar"]
    schedule.epochs_since_improve = sched_meta["epochs_since_improve"]
    schedule.halt = sched_meta["halt"]
    if sched_meta["has_best"]:
        schedule.best_snapshot = {key[len("best."):]: arr.copy()
                                  for key, arr in arrays.items() if key.startswith("best.")}
    history.rows = list(meta["history"]["labeled"])
    history.unlabeled_rows = list(meta["history"]["unlabeled"])
    train_rng.bit_generator.state = json.loads(meta["rng_state"])
    return meta["epoch"]
