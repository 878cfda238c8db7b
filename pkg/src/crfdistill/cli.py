"""Command-line interface.

Verbs: train-teacher, cache, distill, eval, predict, inspect-lattice, k-sweep.
Every command takes ``--config`` (a declarative JSON experiment file),
repeatable ``--set key=value`` overrides with dotted paths, ``--seed`` and
``--out``.  All artifacts land under ``--out`` together with a manifest of
their SHA-256 hashes.  ``CRFDISTILL_MAX_THREADS`` caps worker threads for
teacher caching.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import Corpus, build_tagset, read_conll, write_conll, sequence_metric
from .encoder import Vocab, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, ParseError
from .lattice import Tagset, from_potential_tables, posteriors
from .pipeline import (
    EventLog,
    TeacherModel,
    TrainConfig,
    TrainResult,
    cache_teachers,
    encode_split,
    predict_labels,
    read_cache,
    run_distillation,
    train_student,
    train_teacher,
    write_cache,
)
from .reports import (
    lattice_report,
    save_k_sweep,
    save_posterior_heatmap,
    save_training_curves,
    write_tsv,
)

TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _max_threads() -> int:
    raw = os.environ.get("CRFDISTILL_MAX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CRFDISTILL_MAX_THREADS={raw!r} is not an integer")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        target = config
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        target[parts[-1]] = _parse_value(raw)
    return config


def load_config(args) -> dict:
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}")
    else:
        config = {}
    apply_overrides(config, args.set or [])
    if args.seed is not None:
        config.setdefault("train", {})["seed"] = args.seed
    return config


def train_config_from(config: dict) -> TrainConfig:
    section = dict(config.get("train", {}))
    unknown = set(section) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train options: {sorted(unknown)}")
    return TrainConfig(**section)


def load_corpora(config: dict) -> dict[str, Corpus]:
    task = config.get("task", {})
    scheme = task.get("scheme", "bio")
    tok_col = task.get("token_column", 0)
    lab_col = task.get("label_column", -1)
    languages = config.get("languages")
    if not languages:
        raise ConfigError("config must list corpus paths under 'languages'")
    raw = {}
    for lang, paths in languages.items():
        splits = {}
        for split, path in paths.items():
            splits[split] = read_conll(path, tok_col, lab_col)
        if not any(splits.values()):
            raise ConfigError(f"language {lang!r} has no sentences in any split")
        raw[lang] = splits
    tagset = build_tagset(sents for splits in raw.values() for sents in splits.values())
    return {lang: Corpus(lang, splits, tagset, scheme) for lang, splits in raw.items()}


def load_teacher(path) -> TeacherModel:
    params, meta = load_checkpoint(path)
    return TeacherModel(params, Vocab(meta["vocab"]), Tagset(tuple(meta["labels"])))


class OutDir:
    """Tracks artifacts written under the output directory for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        self.artifacts.append(p)
        return p

    def write_manifest(self) -> None:
        entries = {}
        for p in sorted(set(self.artifacts)):
            if p.exists():
                entries[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        with open(self.root / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump({"artifacts": entries}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _save_result(out: OutDir, result: TrainResult, stem: str, kind: str,
                 languages: list[str], extra_meta: dict | None = None) -> Path:
    meta = {
        "kind": kind,
        "languages": languages,
        "scheme": result.scheme,
        "vocab": list(result.vocab.tokens),
        "labels": list(result.tagset.labels),
        "best_metric": result.best_metric,
        "best_epoch": result.best_epoch,
    }
    meta.update(extra_meta or {})
    ckpt = out.path(f"{stem}.ckpt")
    save_checkpoint(ckpt, result.params, meta)
    if result.history:
        save_training_curves(out.path(f"{stem}_curves.png"), result.history)
    return ckpt


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_teacher(config: dict, out: OutDir) -> None:
    cfg = train_config_from(config)
    corpora = load_corpora(config)
    lang = config.get("teacher", {}).get("language")
    if lang is None:
        if len(corpora) != 1:
            raise ConfigError("set teacher.language when the config lists several languages")
        lang = next(iter(corpora))
    if lang not in corpora:
        raise ConfigError(f"language {lang!r} not present in the config")
    events = EventLog(out.path(f"teacher_{lang}_events.jsonl"))
    result = train_teacher(corpora[lang], cfg, event_log=events)
    _save_result(out, result, f"teacher_{lang}", "teacher", [lang],
                 {"d_emb": cfg.d_emb, "hidden": cfg.hidden})
    print(f"teacher {lang}: best dev metric {100 * result.best_metric:.2f} "
          f"at epoch {result.best_epoch}")


def _teachers_from_config(config: dict) -> dict[str, TeacherModel]:
    spec = config.get("teachers")
    if not spec:
        raise ConfigError("config must map languages to teacher checkpoints under 'teachers'")
    return {lang: load_teacher(path) for lang, path in spec.items()}


def cmd_cache(config: dict, out: OutDir) -> None:
    corpora = load_corpora(config)
    teachers = _teachers_from_config(config)
    kind = train_config_from(config).loss_kind()
    if kind is None:
        raise ConfigError("cache requires train.kd_kind to name a distillation variant")
    records = cache_teachers(teachers, corpora, kind, max_workers=_max_threads())
    name = Path(config.get("cache", "teacher_cache.jsonl")).name
    write_cache(records, out.path(name))
    print(f"wrote {len(records)} cache records ({kind.variant}) to {out.root / name}")


def cmd_distill(config: dict, out: OutDir) -> None:
    corpora = load_corpora(config)
    teachers = _teachers_from_config(config)
    cfg = train_config_from(config)
    if cfg.loss_kind() is None:
        raise ConfigError("distill requires train.kd_kind to name a distillation variant")
    events = EventLog(out.path("student_events.jsonl"))
    cache_cfg = config.get("cache")
    if cache_cfg and Path(cache_cfg).exists():
        records = read_cache(cache_cfg)
        events.emit(event="cache_complete", records=len(records),
                    kd_kind=cfg.kd_kind, k=cfg.k, reused=True)
        events.emit(event="train_start")
        result = train_student(corpora, records, cfg, event_log=events)
    else:
        result, _ = run_distillation(corpora, teachers, cfg,
                                     cache_path=out.path("teacher_cache.jsonl"),
                                     event_log=events, max_workers=_max_threads())
    _save_result(out, result, "student", "student", sorted(corpora),
                 {"d_emb": cfg.d_emb, "hidden": cfg.hidden, "kd_kind": cfg.kd_kind,
                  "k": cfg.k})
    print(f"student: best dev macro {100 * result.best_metric:.2f} "
          f"at epoch {result.best_epoch}")


def _metric_name(scheme: str) -> str:
    return "F1" if scheme == "bio" else "ACC"


def cmd_eval(config: dict, out: OutDir) -> None:
    corpora = load_corpora(config)
    split = config.get("task", {}).get("eval_split", "test")
    predictions = config.get("predictions")
    scheme = next(iter(corpora.values())).scheme
    name = _metric_name(scheme)
    per_lang = {}
    rows = []
    for lang in sorted(corpora):
        corpus = corpora[lang]
        gold_sents = corpus.split(split) or corpus.split("dev")
        gold = [s.labels for s in gold_sents]
        if predictions:
            if lang not in predictions:
                raise ConfigError(f"no prediction file for language {lang!r}")
            pred_sents = read_conll(predictions[lang])
            pred = [s.labels for s in pred_sents]
            if [len(g) for g in gold] != [len(p) for p in pred]:
                raise DataError(f"{lang}: prediction file does not align with gold")
        else:
            ckpt = config.get("checkpoint")
            if not ckpt:
                raise ConfigError("eval needs either 'predictions' files or a 'checkpoint'")
            params, meta = load_checkpoint(ckpt)
            if list(meta["labels"]) != list(corpus.tagset.labels):
                raise ConfigError("checkpoint tagset does not match the corpora")
            vocab = Vocab(meta["vocab"])
            sents = [s for s in encode_split(
                Corpus(lang, {"eval": gold_sents}, corpus.tagset, scheme), vocab, "eval")]
            pred = predict_labels(params, sents, corpus.tagset)
        metric = sequence_metric(scheme, gold, pred)
        per_lang[lang] = metric
        rows.append((lang, f"{100 * metric:.4f}"))
        print(f"{lang}: {name} = {100 * metric:.2f}")
    macro = float(np.mean(list(per_lang.values())))
    print(f"macro: {name} = {100 * macro:.2f}")
    rows.append(("macro", f"{100 * macro:.4f}"))
    write_tsv(out.path("metrics.tsv"), ("language", name.lower()), rows)
    with open(out.path("metrics.json"), "w", encoding="utf-8") as fh:
        json.dump({"metric": name.lower(), "per_language": per_lang, "macro": macro},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_predict(config: dict, out: OutDir) -> None:
    corpora = load_corpora(config)
    split = config.get("task", {}).get("eval_split", "test")
    ckpt = config.get("checkpoint")
    if not ckpt:
        raise ConfigError("predict requires a 'checkpoint' path in the config")
    params, meta = load_checkpoint(ckpt)
    vocab = Vocab(meta["vocab"])
    for lang in sorted(corpora):
        corpus = corpora[lang]
        if list(meta["labels"]) != list(corpus.tagset.labels):
            raise ConfigError("checkpoint tagset does not match the corpora")
        sents = corpus.split(split) or corpus.split("dev")
        encoded = encode_split(Corpus(lang, {"p": sents}, corpus.tagset, corpus.scheme),
                               vocab, "p")
        pred = predict_labels(params, encoded, corpus.tagset)
        path = out.path(f"pred_{lang}.conll")
        write_conll(path, sents, extra_labels=pred)
        print(f"wrote predictions for {lang} to {path}")


def read_potential_file(path) -> tuple[Tagset, "np.ndarray"]:
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    for key in ("labels", "start", "pairs"):
        if key not in spec:
            raise ConfigError(f"{path}: potential table needs a {key!r} entry")
    tagset = Tagset(tuple(spec["labels"]))
    lattice = from_potential_tables(spec["pairs"], spec["start"])
    if lattice.num_labels != tagset.size:
        raise ConfigError(f"{path}: potential tables do not match the label count")
    return tagset, lattice


def cmd_inspect_lattice(config: dict, out: OutDir | None) -> None:
    path = config.get("potentials")
    if not path:
        raise ConfigError("inspect-lattice requires 'potentials' (a raw potential table file)")
    k = int(config.get("k", 2))
    tagset, lattice = read_potential_file(path)
    report = lattice_report(lattice, tagset, k)
    print(report)
    if out is not None:
        with open(out.path("lattice_report.txt"), "w", encoding="utf-8") as fh:
            fh.write(report + "\n")
        save_posterior_heatmap(out.path("posteriors.png"), posteriors(lattice),
                               tagset.labels)


def cmd_k_sweep(config: dict, out: OutDir) -> None:
    base = dict(config.get("train", {}))
    unknown = set(base) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train options: {sorted(unknown)}")
    corpora = load_corpora(config)
    teachers = _teachers_from_config(config)
    variant = base.get("kd_kind", "topwk")
    if variant not in ("topk", "topwk", "pos_topwk"):
        raise ConfigError("k-sweep requires a k-dependent kd_kind (topk/topwk/pos_topwk)")
    ks = list(range(1, 11))
    dev_scores = []
    for k in ks:
        cfg = TrainConfig(**{**base, "kd_kind": variant, "k": k})
        result, _ = run_distillation(corpora, teachers, cfg,
                                     max_workers=_max_threads())
        dev_scores.append(result.best_metric)
        print(f"k = {k:2d}: dev macro {100 * result.best_metric:.2f}")
    write_tsv(out.path("k_sweep.tsv"), ("k", "dev_macro"),
              [(k, f"{100 * s:.4f}") for k, s in zip(ks, dev_scores)])
    save_k_sweep(out.path("k_sweep.png"), ks, {variant: dev_scores})


# ---------------------------------------------------------------------------

COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "cache": cmd_cache,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect-lattice": cmd_inspect_lattice,
    "k-sweep": cmd_k_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crfdistill",
        description="Linear-chain CRF sequence labeling with structure-level "
                    "knowledge distillation",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", type=str, default=None,
                       help="declarative experiment file (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed")
        p.add_argument("--out", type=str, default="out",
                       help="output directory for all artifacts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        out = OutDir(args.out)
        COMMANDS[args.verb](config, out)
        out.write_manifest()
    except (ConfigError, ParseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
