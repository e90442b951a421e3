"""Command-line entry point.

One experiment config drives every command; artifacts land under
``<out>/<config-hash>/<command>/``.  Exit codes: 0 success, 2 config/schema
violation, 3 missing corpus, 1 anything else.  Logs stream as line-delimited
JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as ag
from . import corpus as cp
from . import evaluate as ev
from . import train as tr
from .attack import AttackParams
from .config import ExperimentConfig, load_config
from .dsp import save_features
from .errors import ConfigError, MtlAugError, ValidationError
from .model import ModelConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_CORPUS = 3


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(payload)


def _setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class Workspace:
    """Resolved config plus the deterministic on-disk layout for one run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.root = Path(cfg.out_dir) / self.hash

    def command_dir(self, command: str) -> Path:
        out = self.root / command
        out.mkdir(parents=True, exist_ok=True)
        return out

    def cache_dir(self) -> Path:
        env = os.environ.get("MTLAUG_CACHE")
        base = Path(env) if env else self.root / "cache"
        out = base / self.hash if env else base
        out.mkdir(parents=True, exist_ok=True)
        return out

    # -- corpus resolution --------------------------------------------------

    def _synth_config(self, section) -> cp.SynthConfig:
        return cp.SynthConfig(
            n_speakers=section.n_speakers,
            utterances_per_speaker_per_class=section.utterances_per_speaker_per_class,
            duration_s=section.duration_s, seed=section.seed)

    def _materialize(self, synth_cfg: cp.SynthConfig, name: str,
                     unlabeled: bool = False) -> cp.Corpus:
        out = self.root / "synth" / name
        manifest = out / "manifest.csv"
        if manifest.exists():
            return cp.load_manifest(manifest, name=name)
        log.info("synthesizing corpus %s under %s", name, out)
        return cp.synth_corpus(synth_cfg, out, name=name, unlabeled=unlabeled)

    def corpus(self) -> cp.Corpus:
        section = self.cfg.corpus
        if section.manifest is not None:
            path = Path(section.manifest)
            if not path.exists():
                raise FileNotFoundError(f"corpus manifest not found: {path}")
            return cp.load_manifest(path, merge_excited=section.merge_excited)
        return self._materialize(self._synth_config(section.synth), "corpus")

    def unlabeled(self) -> cp.Corpus | None:
        section = self.cfg.corpus
        if section.unlabeled_manifest is not None:
            path = Path(section.unlabeled_manifest)
            if not path.exists():
                raise FileNotFoundError(f"unlabeled manifest not found: {path}")
            return cp.load_manifest(path).as_unlabeled()
        if section.synth_unlabeled is not None:
            return self._materialize(self._synth_config(section.synth_unlabeled),
                                     "unlabeled", unlabeled=True)
        return None

    def cross_target(self) -> cp.Corpus:
        section = self.cfg.corpus
        if section.cross_target_manifest is not None:
            path = Path(section.cross_target_manifest)
            if not path.exists():
                raise FileNotFoundError(f"cross-target manifest not found: {path}")
            return cp.load_manifest(path, name="target",
                                    merge_excited=section.merge_excited)
        if section.synth_cross_target and section.synth is not None:
            shifted = self._synth_config(section.synth).shifted()
            return self._materialize(shifted, "cross_target")
        raise ConfigError("corpus.cross_target_manifest: required for cross-corpus "
                          "evaluation (or enable corpus.synth_cross_target)")

    def noise_pool(self) -> list[cp.Waveform]:
        section = self.cfg.corpus
        if section.noise_dir is not None:
            noise_dir = Path(section.noise_dir)
            if not noise_dir.exists():
                raise FileNotFoundError(f"noise directory not found: {noise_dir}")
            paths = sorted(noise_dir.glob("*.wav"))
        else:
            noise_dir = self.root / "synth" / "noise"
            paths = sorted(noise_dir.glob("*.wav"))
            if not paths:
                paths = cp.synth_noise_pool(noise_dir, section.synth_noise_files,
                                            duration_s=4.0, seed=self.cfg.seed)
        return [cp.read_wav(p) for p in paths]

    # -- derived configs -----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return replace(self.cfg.model, input_mels=self.cfg.features.n_mels,
                       input_frames=self.cfg.features.n_frames)

    def setup(self) -> ev.ProtocolSetup:
        return ev.ProtocolSetup(self.cfg.features, self.cfg.augment,
                                self.model_config(), self.cfg.train)

    def attack_params(self) -> list[AttackParams]:
        return [AttackParams(a.kind, a.epsilon, a.bim_steps, a.bim_step_size)
                for a in self.cfg.protocol.attacks]

    def write_report(self, report: ev.ExperimentReport, command: str, stem: str):
        report.config_hash = self.hash
        out = self.command_dir(command)
        report.to_json(out / f"{stem}.report.json")
        report.to_csv(out / f"{stem}.csv")
        log.info("wrote %s", out / f"{stem}.report.json")

    def train_holdout(self, corpus: cp.Corpus) -> tuple:
        """Train on all but two speakers; returns (model, history, test corpus)."""
        speakers = sorted(corpus.speakers)
        if len(speakers) < 3:
            raise ValidationError("holdout training needs at least 3 speakers")
        test_spk, val_spk = speakers[-1], speakers[-2]
        test = corpus.subset(lambda u: u.speaker_id == test_spk, "test")
        val = corpus.subset(lambda u: u.speaker_id == val_spk, "val")
        train_corpus = corpus.subset(
            lambda u: u.speaker_id not in (test_spk, val_spk), "train")
        model, history = tr.fit(train_corpus, val, self.unlabeled(), self.cfg.features,
                                self.cfg.augment, self.model_config(), self.cfg.train,
                                seed=self.cfg.seed)
        return model, history, test


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(ws: Workspace) -> int:
    corpus = ws.corpus()
    log.info("corpus %s: %d utterances, %d speakers", corpus.name, len(corpus),
             len(corpus.speakers))
    pool = ws.unlabeled()
    if pool is not None:
        log.info("unlabeled pool: %d utterances", len(pool))
    if ws.cfg.corpus.synth_cross_target:
        target = ws.cross_target()
        log.info("cross target: %d utterances", len(target))
    if ws.cfg.corpus.noise_dir is None:
        ws.noise_pool()
    summary = ws.command_dir("synth") / "summary.json"
    summary.write_text(json.dumps({"config_hash": ws.hash, "seed": ws.cfg.seed,
                                   "utterances": len(corpus),
                                   "speakers": list(corpus.speakers)}, indent=1))
    return EXIT_OK


def cmd_features(ws: Workspace) -> int:
    corpus = ws.corpus()
    cache = ws.cache_dir()
    features = ag.extract_features(corpus, ws.cfg.features)
    for uid, spec in features.items():
        save_features(cache / f"{uid}.lmsp", spec)
    log.info("cached %d feature blobs under %s", len(features), cache)
    index = ws.command_dir("features") / "index.json"
    index.write_text(json.dumps({"config_hash": ws.hash, "seed": ws.cfg.seed,
                                 "cache_dir": str(cache),
                                 "utterances": sorted(features)}, indent=1))
    return EXIT_OK


def cmd_augment(ws: Workspace) -> int:
    corpus = ws.corpus()
    rng = np.random.default_rng(np.random.SeedSequence((ws.cfg.seed, 0xA06)))
    samples = ag.build_augmented_set(corpus, ws.cfg.augment, ws.cfg.features, rng)
    out = ws.command_dir("augment")
    records = []
    for i, sample in enumerate(samples):
        stem = f"sample_{i:06d}"
        ag.save_augmented(out / f"{stem}.lmsa", sample)
        records.append({"file": f"{stem}.lmsa", "aug_type": int(sample.aug_type),
                        "source_ids": list(sample.source_ids)})
    (out / "set.json").write_text(json.dumps(
        {"config_hash": ws.hash, "seed": ws.cfg.seed, "samples": records}, indent=1))
    log.info("materialized %d augmented samples", len(samples))
    return EXIT_OK


def cmd_train(ws: Workspace) -> int:
    corpus = ws.corpus()
    model, history, test = ws.train_holdout(corpus)
    out = ws.command_dir("train")
    run_hash = tr.setup_hash(ws.cfg.features, ws.cfg.augment, model.config, ws.cfg.train)
    tr.save_checkpoint(out / "model.ckpt", model, run_hash=run_hash,
                       extra_meta={"config_hash": ws.hash, "seed": ws.cfg.seed})
    history.to_csv(out / "history.csv",
                   header_comment=f"config_hash={ws.hash} seed={ws.cfg.seed}")
    history.to_json(out / "history.json")
    cm = ev.evaluate_model(model, test, ws.cfg.features)
    (out / "holdout.json").write_text(json.dumps(
        {"config_hash": ws.hash, "seed": ws.cfg.seed,
         "test_speaker": test.speakers[0], "uar": ev.uar(cm),
         "confusion": cm.to_list()}, indent=1))
    log.info("holdout UAR %.4f", ev.uar(cm))
    return EXIT_OK


def cmd_eval_loso(ws: Workspace) -> int:
    report = ev.loso_evaluate(ws.corpus(), ws.setup(), ws.cfg.protocol.n_repeats,
                              base_seed=ws.cfg.seed, unlabeled=ws.unlabeled(),
                              jobs=ws.cfg.jobs)
    ws.write_report(report, "eval-loso", "loso")
    return EXIT_OK


def cmd_eval_cross(ws: Workspace) -> int:
    source = ws.corpus()
    target = ws.cross_target()
    setup = ws.setup()
    jobs = ws.cfg.jobs
    n = ws.cfg.protocol.n_repeats
    fwd = ev.cross_corpus_evaluate(source, target, setup, n, ws.cfg.seed, jobs,
                                   ws.cfg.corpus.speaker_disjoint_split)
    back = ev.cross_corpus_evaluate(target, source, setup, n, ws.cfg.seed + 1, jobs,
                                    ws.cfg.corpus.speaker_disjoint_split)
    fwd.rows.extend(back.rows)
    fwd.confusions.update(back.confusions)
    fwd.seeds.extend(back.seeds)
    fwd.wall_clock_s += back.wall_clock_s
    ws.write_report(fwd, "eval-cross", "cross")
    return EXIT_OK


def cmd_eval_noise(ws: Workspace) -> int:
    model, _, test = ws.train_holdout(ws.corpus())
    report = ev.noisy_evaluate(model, test, ws.noise_pool(), ws.cfg.features,
                               snrs=ws.cfg.protocol.snrs, seed=ws.cfg.seed)
    ws.write_report(report, "eval-noise", "noise")
    return EXIT_OK


def cmd_eval_attack(ws: Workspace) -> int:
    model, _, test = ws.train_holdout(ws.corpus())
    report = ev.adversarial_evaluate(model, test, ws.attack_params(), ws.cfg.features)
    ws.write_report(report, "eval-attack", "attack")
    return EXIT_OK


def cmd_study_aug(ws: Workspace) -> int:
    report = ev.study_augmentation_selection(ws.corpus(), ws.setup(),
                                             ws.cfg.protocol.n_repeats,
                                             base_seed=ws.cfg.seed, jobs=ws.cfg.jobs)
    ws.write_report(report, "study-aug", "augmentation_selection")
    return EXIT_OK


def cmd_study_fraction(ws: Workspace) -> int:
    report = ev.study_label_fraction(
        ws.corpus(), ws.setup(), ws.cfg.protocol.fractions,
        ws.cfg.protocol.n_repeats, base_seed=ws.cfg.seed,
        unlabeled_remainder=ws.cfg.protocol.unlabeled_remainder, jobs=ws.cfg.jobs)
    ws.write_report(report, "study-fraction", "label_fraction")
    return EXIT_OK


def cmd_study_ablation(ws: Workspace) -> int:
    target = ws.cross_target() if (ws.cfg.corpus.cross_target_manifest
                                   or ws.cfg.corpus.synth_cross_target) else None
    report = ev.study_ablation(ws.corpus(), ws.setup(), cross_target=target,
                               n_repeats=ws.cfg.protocol.n_repeats,
                               base_seed=ws.cfg.seed, jobs=ws.cfg.jobs)
    ws.write_report(report, "study-ablation", "ablation")
    return EXIT_OK


def cmd_report(ws: Workspace, paths: list[str]) -> int:
    sources = [Path(p) for p in paths] if paths \
        else sorted(ws.root.glob("*/*.report.json"))
    if not sources:
        log.warning("no report JSONs found under %s", ws.root)
    merged = ev.merge_reports(sources)
    out = ws.command_dir("report")
    (out / "summary.json").write_text(json.dumps(
        {"config_hash": ws.hash, "protocols": merged}, indent=1, sort_keys=True))
    text = ev.format_merged(merged)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval-loso": cmd_eval_loso,
    "eval-cross": cmd_eval_cross,
    "eval-noise": cmd_eval_noise,
    "eval-attack": cmd_eval_attack,
    "study-aug": cmd_study_aug,
    "study-fraction": cmd_study_fraction,
    "study-ablation": cmd_study_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlaug",
                                     description="Multitask speech emotion "
                                                 "recognition experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="experiment config (JSON/TOML)")
        cmd.add_argument("--out", default=None, help="output root (overrides config)")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
        cmd.add_argument("--jobs", type=int, default=None, help="worker pool size")
        cmd.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="dotted config override")
        cmd.add_argument("--verbose", action="store_true")
        if name == "report":
            cmd.add_argument("paths", nargs="*", help="report JSONs to merge")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    ws = Workspace(cfg)
    started = time.time()
    try:
        if args.command == "report":
            code = cmd_report(ws, args.paths)
        else:
            code = COMMANDS[args.command](ws)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_CORPUS
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MtlAugError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    log.info("%s finished in %.1fs", args.command, time.time() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
