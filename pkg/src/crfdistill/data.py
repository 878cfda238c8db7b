"""Corpus ingestion (CoNLL column format) and sequence-labeling metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .errors import ParseError
from .lattice import Tagset

log = logging.getLogger(__name__)

SCHEMES = ("bio", "tags")


@dataclass
class RawSentence:
    tokens: list[str]
    labels: list[str]


class Span(NamedTuple):
    start: int
    end: int        # inclusive
    type: str


@dataclass
class Corpus:
    """One language's data: train/dev/test splits over a shared tagset.

    ``scheme`` selects the evaluation metric: span F1 for "bio" label sets,
    token accuracy for plain "tags".
    """

    language: str
    splits: dict[str, list[RawSentence]]
    tagset: Tagset
    scheme: str = "bio"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        for name, sents in self.splits.items():
            for s in sents:
                if not s.tokens:
                    raise ValueError(f"{self.language}/{name}: empty sentence")
                for lab in s.labels:
                    if lab not in self.tagset.labels:
                        raise ValueError(
                            f"{self.language}/{name}: label {lab!r} missing from tagset")

    def split(self, name: str) -> list[RawSentence]:
        return self.splits.get(name, [])


def read_conll(path, token_column: int = 0, label_column: int = -1) -> list[RawSentence]:
    """Read one whitespace-separated column file; blank lines end sentences.

    Lines starting with ``-DOCSTART-`` are skipped.  A line with too few
    columns for the requested indices raises :class:`ParseError` with its
    line number.
    """
    sentences: list[RawSentence] = []
    tokens: list[str] = []
    labels: list[str] = []
    needed = max(token_column, 0 if label_column < 0 else label_column) + 1
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                if tokens:
                    sentences.append(RawSentence(tokens, labels))
                    tokens, labels = [], []
                continue
            if stripped.startswith("-DOCSTART-"):
                continue
            cols = stripped.split()
            if len(cols) < needed:
                raise ParseError(path, line_no,
                                 f"expected at least {needed} columns, found {len(cols)}")
            tokens.append(cols[token_column])
            labels.append(cols[label_column])
    if tokens:
        sentences.append(RawSentence(tokens, labels))
    if not sentences:
        log.warning("%s: no sentences found", path)
    return sentences


def write_conll(path, sentences: Iterable[RawSentence],
                extra_labels: Sequence[Sequence[str]] | None = None) -> None:
    """Write token+label columns; optionally append one extra label column."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, sent in enumerate(sentences):
            for j, (tok, lab) in enumerate(zip(sent.tokens, sent.labels)):
                if extra_labels is not None:
                    fh.write(f"{tok} {lab} {extra_labels[i][j]}\n")
                else:
                    fh.write(f"{tok} {lab}\n")
            fh.write("\n")


def build_tagset(corpora_sentences: Iterable[Iterable[RawSentence]]) -> Tagset:
    """Sorted union of all labels seen anywhere, so nothing is silently dropped."""
    labels = sorted({lab for sents in corpora_sentences for s in sents for lab in s.labels})
    return Tagset(tuple(labels))


def decode_spans(labels: Sequence[str]) -> frozenset[Span]:
    """Maximal BIO spans with lenient handling of dangling I-X tags.

    An ``I-X`` whose predecessor is neither ``B-X`` nor ``I-X`` opens a new
    span, matching the conlleval convention.
    """
    spans = []
    start = None
    cur_type = None
    for i, lab in enumerate(labels):
        if lab == "O":
            if start is not None:
                spans.append(Span(start, i - 1, cur_type))
                start = None
            continue
        if "-" in lab:
            prefix, typ = lab.split("-", 1)
        else:
            prefix, typ = "B", lab
        if prefix == "B" or start is None or typ != cur_type:
            if start is not None:
                spans.append(Span(start, i - 1, cur_type))
            start, cur_type = i, typ
    if start is not None:
        spans.append(Span(start, len(labels) - 1, cur_type))
    return frozenset(spans)


def encode_spans(spans: Iterable[Span], length: int) -> list[str]:
    """Canonical BIO emission of a set of non-overlapping spans."""
    ordered = sorted(spans)
    labels = ["O"] * length
    prev_end = -1
    for sp in ordered:
        if sp.start <= prev_end:
            raise ValueError("spans overlap")
        if not 0 <= sp.start <= sp.end < length:
            raise ValueError("span out of range")
        labels[sp.start] = f"B-{sp.type}"
        for i in range(sp.start + 1, sp.end + 1):
            labels[i] = f"I-{sp.type}"
        prev_end = sp.end
    return labels


def span_f1(gold: Sequence[frozenset], pred: Sequence[frozenset]) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over exact span matches."""
    if len(gold) != len(pred):
        raise ValueError("gold and predicted sentence counts differ")
    tp = sum(len(g & p) for g, p in zip(gold, pred))
    n_pred = sum(len(p) for p in pred)
    n_gold = sum(len(g) for g in gold)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def token_accuracy(gold: Sequence[Sequence], pred: Sequence[Sequence]) -> float:
    if len(gold) != len(pred):
        raise ValueError("gold and predicted sentence counts differ")
    correct = total = 0
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError("sentence length mismatch")
        correct += sum(1 for a, b in zip(g, p) if a == b)
        total += len(g)
    return correct / total if total else 0.0


def sequence_metric(scheme: str, gold_labels: Sequence[Sequence[str]],
                    pred_labels: Sequence[Sequence[str]]) -> float:
    """Task metric as a fraction: span F1 for "bio", accuracy for "tags"."""
    if scheme == "bio":
        return span_f1([decode_spans(g) for g in gold_labels],
                       [decode_spans(p) for p in pred_labels])[2]
    return token_accuracy(gold_labels, pred_labels)
