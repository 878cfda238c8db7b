"""End-to-end distillation pipeline.

Two phases, in order: every teacher's pseudo-targets are computed and frozen
into cache records over its own language's training corpus, then the
multilingual student trains against gold + cached targets with the
interpolation coefficient annealed once per epoch.  Teachers themselves are
trained with plain NLL (no distillation).

All randomness flows through ``numpy.random.default_rng`` seeded from
``(config.seed, epoch)``, so batch composition for a given epoch index is
reproducible independently of training history.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import Corpus, sequence_metric
from .encoder import (
    ModelParams,
    TokenBatch,
    Vocab,
    backprop,
    encode,
    init_params,
)
from .errors import ConfigError, DataError
from .lattice import (
    KBestList,
    Lattice,
    ScoredSequence,
    Tagset,
    kbest_viterbi,
    nll_and_grad,
    posteriors,
    viterbi,
)
from .losses import (
    InterpolationState,
    KDLossKind,
    KD_VARIANTS,
    anneal_lambda,
    interpolated_loss,
    kd_loss_and_grad,
    softmax_rows,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run (teacher or student)."""

    batch_tokens: int = 2000
    lr: float = 0.1
    lr_decay: float = 0.5
    patience_epochs: int = 10
    max_epochs: int = 100
    tau: float = 1.0
    kd_kind: str = "none"          # "none" or one of the KD variants
    k: int = 1
    seed: int = 0
    d_emb: int = 32
    hidden: int = 32
    input_dropout: float = 0.0
    clip_norm: float = 5.0
    max_lr_decays: int = 3

    def __post_init__(self):
        if self.batch_tokens < 1 or self.max_epochs < 1 or self.patience_epochs < 1:
            raise ConfigError("batch_tokens, max_epochs and patience_epochs must be positive")
        if self.lr < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be >= 0 and lr_decay in (0, 1]")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if not 1 <= self.k <= 10:
            raise ConfigError("k must lie in [1, 10]")
        if self.kd_kind != "none" and self.kd_kind not in KD_VARIANTS:
            raise ConfigError(f"unknown kd_kind {self.kd_kind!r}")
        if not 0 <= self.input_dropout < 1:
            raise ConfigError("input_dropout must lie in [0, 1)")

    def loss_kind(self) -> KDLossKind | None:
        if self.kd_kind == "none":
            return None
        k = self.k if self.kd_kind in ("topk", "topwk", "pos_topwk") else None
        return KDLossKind(self.kd_kind, k)


@dataclass
class EncodedSentence:
    sentence_id: str
    language: str
    token_ids: np.ndarray
    gold: list[int]

    @property
    def n(self) -> int:
        return len(self.gold)


@dataclass
class TeacherCacheRecord:
    """Frozen pseudo-targets for one training sentence."""

    sentence_id: str
    language: str
    kbest: KBestList | None
    posteriors: np.ndarray | None
    teacher_hash: str

    def __post_init__(self):
        if self.kbest is None and self.posteriors is None:
            raise ValueError("cache record must carry a k-best list or posteriors")
        if self.kbest is not None:
            total = sum(s.normalized_weight for s in self.kbest.sequences)
            if abs(total - 1.0) > 1e-6:
                raise ValueError("k-best weights must sum to 1")


class EventLog:
    """Line-delimited JSON event stream, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.path = path
        self.events: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def emit(self, **fields) -> None:
        self.events.append(fields)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    params: ModelParams          # best-dev checkpoint
    vocab: Vocab
    tagset: Tagset
    scheme: str
    best_metric: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    final_params: ModelParams | None = None   # state after the last epoch


# ---------------------------------------------------------------------------
# Corpus encoding and batching
# ---------------------------------------------------------------------------

def sentence_id(language: str, index: int) -> str:
    return f"{language}:{index}"


def encode_split(corpus: Corpus, vocab: Vocab, split: str) -> list[EncodedSentence]:
    out = []
    for i, sent in enumerate(corpus.split(split)):
        gold = [corpus.tagset.index(lab) for lab in sent.labels]
        out.append(EncodedSentence(sentence_id(corpus.language, i), corpus.language,
                                   vocab.encode(sent.tokens), gold))
    return out


def batch_by_tokens(sentences: Sequence[EncodedSentence], batch_tokens: int,
                    seed) -> list[list[EncodedSentence]]:
    """Shuffle with the seeded rng, then greedily pack to the token budget.

    Every sentence appears exactly once; a sentence longer than the budget is
    emitted alone with a warning.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sentences))
    batches: list[list[EncodedSentence]] = []
    current: list[EncodedSentence] = []
    used = 0
    for idx in order:
        s = sentences[idx]
        if s.n > batch_tokens:
            log.warning("sentence %s has %d tokens, over the %d budget; emitting alone",
                        s.sentence_id, s.n, batch_tokens)
        if current and used + s.n > batch_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(s)
        used += s.n
    if current:
        batches.append(current)
    return batches


def to_token_batch(batch: Sequence[EncodedSentence]) -> TokenBatch:
    return TokenBatch([s.token_ids for s in batch], [s.language for s in batch])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_labels(params: ModelParams, sentences: Sequence[EncodedSentence],
                   tagset: Tagset) -> list[list[str]]:
    if not sentences:
        return []
    emissions = encode(params, to_token_batch(sentences))
    out = []
    for em in emissions:
        path = viterbi(Lattice(em, params.transitions))
        out.append([tagset.labels[j] for j in path])
    return out


def evaluate_params(params: ModelParams, sentences: Sequence[EncodedSentence],
                    tagset: Tagset, scheme: str) -> float:
    gold = [[tagset.labels[j] for j in s.gold] for s in sentences]
    pred = predict_labels(params, sentences, tagset)
    return sequence_metric(scheme, gold, pred)


# ---------------------------------------------------------------------------
# The optimizer loop shared by teacher and student training
# ---------------------------------------------------------------------------

def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def _train_loop(train_sents: list[EncodedSentence],
                dev_sets: dict[str, list[EncodedSentence]],
                vocab: Vocab, tagset: Tagset, scheme: str, config: TrainConfig,
                cache_lookup: dict[str, TeacherCacheRecord] | None = None,
                lambda_init: float | None = None,
                initial_params: ModelParams | None = None,
                start_epoch: int = 0,
                event_log: EventLog | None = None) -> TrainResult:
    kind = config.loss_kind()
    if lambda_init is None:
        lambda_init = 1.0 if kind is not None else 0.0
    if kind is not None and lambda_init > 0.0:
        if cache_lookup is None:
            raise DataError("distillation requested but no teacher cache supplied")
        for s in train_sents:
            if s.sentence_id not in cache_lookup:
                raise DataError(f"no teacher cache record for sentence {s.sentence_id}")

    params = initial_params.copy() if initial_params is not None else init_params(
        len(vocab), config.d_emb, config.hidden, tagset.size, config.seed)
    state = InterpolationState(lambda_init, config.tau)
    lr = config.lr
    events = event_log or EventLog()
    best_metric, best_epoch, best_params = -np.inf, -1, params.copy()
    stale = decays = 0

    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        epoch_loss, n_sent = 0.0, 0
        for batch in batch_by_tokens(train_sents, config.batch_tokens, [config.seed, epoch]):
            tb = to_token_batch(batch)
            dropout_seed = None
            if config.input_dropout > 0:
                dropout_seed = abs(hash((config.seed, epoch, n_sent))) % 2**31
            emissions = encode(params, tb, dropout_rate=config.input_dropout,
                               dropout_seed=dropout_seed)
            b = len(batch)
            demits = []
            dtrans = np.zeros_like(params.transitions)
            for s, em in zip(batch, emissions):
                lat = Lattice(em, params.transitions)
                nll, nll_grad = nll_and_grad(lat, s.gold)
                if kind is not None and state.lam > 0.0:
                    rec = cache_lookup.get(s.sentence_id)
                    if rec is None:
                        raise DataError(f"no teacher cache record for sentence {s.sentence_id}")
                    kd, kd_grad = kd_loss_and_grad(kind, lat, kbest=rec.kbest,
                                                   teacher_posteriors=rec.posteriors)
                    loss = interpolated_loss(kd, nll, state)
                    grad = kd_grad.scaled(state.lam) + nll_grad.scaled(1.0 - state.lam)
                else:
                    loss, grad = nll, nll_grad
                epoch_loss += loss
                demits.append(grad.emissions / b)
                dtrans += grad.transitions / b
            n_sent += b
            grads = backprop(params, tb, demits, dtrans,
                             dropout_rate=config.input_dropout, dropout_seed=dropout_seed)
            _clip_global_norm(grads, config.clip_norm)
            if lr != 0.0:
                for name, arr in params.arrays().items():
                    arr -= lr * grads[name]

        train_loss = epoch_loss / max(n_sent, 1)
        per_lang = {lang: evaluate_params(params, sents, tagset, scheme)
                    for lang, sents in sorted(dev_sets.items())}
        macro = float(np.mean(list(per_lang.values()))) if per_lang else 0.0
        events.emit(epoch=epoch, **{"lambda": state.lam}, lr=lr, train_loss=train_loss,
                    dev_metric_per_language=per_lang, dev_macro=macro)

        if macro > best_metric:
            best_metric, best_epoch, best_params = macro, epoch, params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience_epochs:
                lr *= config.lr_decay
                stale = 0
                decays += 1
                if decays >= config.max_lr_decays:
                    break
        state = anneal_lambda(state)

    return TrainResult(best_params, vocab, tagset, scheme, best_metric, best_epoch,
                       events.events, final_params=params)


def train_teacher(corpus: Corpus, config: TrainConfig,
                  event_log: EventLog | None = None) -> TrainResult:
    """Train one monolingual model with plain NLL; returns the best-dev checkpoint."""
    if not corpus.split("train") or not corpus.split("dev"):
        raise ConfigError(f"corpus {corpus.language!r} needs non-empty train and dev splits")
    vocab = Vocab.build(s.tokens for s in corpus.split("train"))
    train_sents = encode_split(corpus, vocab, "train")
    dev_sents = {corpus.language: encode_split(corpus, vocab, "dev")}
    cfg = config if config.kd_kind == "none" else TrainConfig(
        **{**config.__dict__, "kd_kind": "none"})
    return _train_loop(train_sents, dev_sents, vocab, corpus.tagset, corpus.scheme, cfg,
                       event_log=event_log)


# ---------------------------------------------------------------------------
# Teacher caching
# ---------------------------------------------------------------------------

@dataclass
class TeacherModel:
    params: ModelParams
    vocab: Vocab
    tagset: Tagset


def make_cache_record(sid: str, language: str, lattice: Lattice, kind: KDLossKind,
                      teacher_hash: str) -> TeacherCacheRecord:
    """Pseudo-targets for one sentence from its teacher's lattice."""
    kbest = kbest_viterbi(lattice, kind.k) if kind.needs_kbest else None
    post = None
    if kind.variant in ("token", "emission"):
        post = softmax_rows(lattice.emissions)
    elif kind.needs_posteriors:
        post = posteriors(lattice)
    return TeacherCacheRecord(sid, language, kbest, post, teacher_hash)


def cache_teachers(teachers: dict[str, TeacherModel], corpora: dict[str, Corpus],
                   kind: KDLossKind, max_workers: int = 1) -> list[TeacherCacheRecord]:
    """One record per training sentence, per language, in deterministic order."""
    for lang, corpus in corpora.items():
        if lang not in teachers:
            raise ConfigError(f"no teacher model for language {lang!r}")
        if teachers[lang].tagset.labels != corpus.tagset.labels:
            raise ConfigError(f"teacher tagset for {lang!r} does not match the corpus tagset")

    def records_for(lang: str) -> list[TeacherCacheRecord]:
        teacher = teachers[lang]
        corpus = corpora[lang]
        sents = encode_split(corpus, teacher.vocab, "train")
        digest = teacher.params.digest()
        emissions = encode(teacher.params, to_token_batch(sents)) if sents else []
        return [
            make_cache_record(s.sentence_id, lang,
                              Lattice(em, teacher.params.transitions), kind, digest)
            for s, em in zip(sents, emissions)
        ]

    langs = sorted(corpora)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_lang = list(pool.map(records_for, langs))
    else:
        per_lang = [records_for(lang) for lang in langs]
    return [rec for chunk in per_lang for rec in chunk]


# --- cache serialization: floats written with 17 significant digits ---------

def _json17(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    if value is None:
        return "null"
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_json17(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(_json17(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)!r}")


def record_to_json(rec: TeacherCacheRecord) -> str:
    obj = {
        "sentence_id": rec.sentence_id,
        "language": rec.language,
        "kbest": None if rec.kbest is None else [
            {"labels": list(s.labels), "weight": float(s.normalized_weight)}
            for s in rec.kbest.sequences
        ],
        "posteriors": None if rec.posteriors is None else
        [[float(x) for x in row] for row in rec.posteriors],
        "teacher_hash": rec.teacher_hash,
    }
    return _json17(obj)


def record_from_json(line: str) -> TeacherCacheRecord:
    obj = json.loads(line)
    kbest = None
    if obj.get("kbest") is not None:
        seqs = tuple(
            ScoredSequence(tuple(int(i) for i in e["labels"]),
                           float(np.log(max(float(e["weight"]), 5e-324))),
                           float(e["weight"]))
            for e in obj["kbest"]
        )
        kbest = KBestList(seqs)
    post = None
    if obj.get("posteriors") is not None:
        post = np.array(obj["posteriors"], dtype=np.float64)
    return TeacherCacheRecord(obj["sentence_id"], obj["language"], kbest, post,
                              obj["teacher_hash"])


def write_cache(records: Iterable[TeacherCacheRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_cache(path) -> list[TeacherCacheRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [record_from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Student training
# ---------------------------------------------------------------------------

def merge_corpora(corpora: dict[str, Corpus]) -> tuple[Vocab, Tagset, str]:
    """Joint vocabulary over all languages plus the shared tagset and scheme."""
    langs = sorted(corpora)
    ref = corpora[langs[0]]
    for lang in langs[1:]:
        if corpora[lang].tagset.labels != ref.tagset.labels:
            raise ConfigError("all corpora must share one tagset")
        if corpora[lang].scheme != ref.scheme:
            raise ConfigError("all corpora must share one labeling scheme")
    vocab = Vocab.build(s.tokens for lang in langs for s in corpora[lang].split("train"))
    return vocab, ref.tagset, ref.scheme


def train_student(corpora: dict[str, Corpus],
                  cache: Sequence[TeacherCacheRecord] | None,
                  config: TrainConfig,
                  event_log: EventLog | None = None,
                  initial_params: ModelParams | None = None,
                  lambda_init: float | None = None,
                  start_epoch: int = 0) -> TrainResult:
    """Train the multilingual student on all languages merged.

    The per-batch loss is ``lambda * KD + (1 - lambda) * NLL`` averaged over
    the batch's sentences; ``lambda`` anneals by ``tau`` after every epoch.
    The returned checkpoint maximizes the unweighted macro-average dev metric
    across languages.
    """
    vocab, tagset, scheme = merge_corpora(corpora)
    train_sents = [s for lang in sorted(corpora)
                   for s in encode_split(corpora[lang], vocab, "train")]
    dev_sets = {lang: encode_split(corpora[lang], vocab, "dev") for lang in sorted(corpora)}
    lookup = None if cache is None else {r.sentence_id: r for r in cache}
    return _train_loop(train_sents, dev_sets, vocab, tagset, scheme, config,
                       cache_lookup=lookup, lambda_init=lambda_init,
                       initial_params=initial_params, start_epoch=start_epoch,
                       event_log=event_log)


def run_distillation(corpora: dict[str, Corpus], teachers: dict[str, TeacherModel],
                     config: TrainConfig, cache_path=None,
                     event_log: EventLog | None = None,
                     max_workers: int = 1) -> tuple[TrainResult, list[TeacherCacheRecord]]:
    """Cache all teacher predictions, then train the student (two phases).

    The event log records cache completion before the first epoch event, which
    makes the phase ordering observable.
    """
    kind = config.loss_kind()
    if kind is None:
        raise ConfigError("run_distillation requires a KD variant; "
                          "use train_student with cache=None for the no-KD baseline")
    events = event_log or EventLog()
    records = cache_teachers(teachers, corpora, kind, max_workers=max_workers)
    if cache_path is not None:
        write_cache(records, cache_path)
    events.emit(event="cache_complete", records=len(records),
                kd_kind=kind.variant, k=kind.k)
    events.emit(event="train_start")
    result = train_student(corpora, records, config, event_log=events)
    return result, records
