"""Deterministic synthetic corpora for desk-scale multilingual experiments.

Each language has its own token-to-label mapping.  A small pool of surface
forms is shared between the languages with deliberately conflicting labels, so
a multilingual model must rely on sentence context (the language-unique
tokens) to disambiguate them; monolingual models see no conflict.
"""

from __future__ import annotations

import numpy as np

from .data import Corpus, RawSentence
from .lattice import Tagset

DEFAULT_LABELS = ("A", "B", "C", "D")


def synthetic_pair(seed: int, n_train: int = 100, n_dev: int = 50, n_test: int = 0,
                   tokens_per_language: int = 20, shared_tokens: int = 6,
                   n_labels: int = 4, noise: float = 0.1,
                   min_len: int = 4, max_len: int = 8,
                   languages: tuple[str, str] = ("l1", "l2")) -> dict[str, Corpus]:
    """Two single-language corpora with distinct token-to-label mappings.

    ``noise`` flips that fraction of training labels to a different label;
    dev and test splits stay clean.
    """
    labels = DEFAULT_LABELS[:n_labels]
    tagset = Tagset(labels)
    rng = np.random.default_rng(seed)

    shared = [f"sh{i:02d}" for i in range(shared_tokens)]
    pools, mappings = {}, {}
    base_shared = rng.integers(0, n_labels, size=shared_tokens)
    for li, lang in enumerate(languages):
        unique = [f"{lang}w{i:02d}" for i in range(tokens_per_language - shared_tokens)]
        pools[lang] = shared + unique
        mapping = {}
        for j, tok in enumerate(shared):
            mapping[tok] = int((base_shared[j] + li) % n_labels)
        for tok in unique:
            mapping[tok] = int(rng.integers(0, n_labels))
        mappings[lang] = mapping

    def make_split(lang: str, count: int, with_noise: bool) -> list[RawSentence]:
        pool = pools[lang]
        mapping = mappings[lang]
        sents = []
        for _ in range(count):
            n = int(rng.integers(min_len, max_len + 1))
            toks = [pool[int(t)] for t in rng.integers(0, len(pool), size=n)]
            labs = [mapping[t] for t in toks]
            if with_noise and noise > 0:
                for i in range(n):
                    if rng.random() < noise:
                        labs[i] = int((labs[i] + 1 + rng.integers(0, n_labels - 1)) % n_labels)
            sents.append(RawSentence(toks, [labels[j] for j in labs]))
        return sents

    corpora = {}
    for lang in languages:
        splits = {
            "train": make_split(lang, n_train, with_noise=True),
            "dev": make_split(lang, n_dev, with_noise=False),
        }
        if n_test:
            splits["test"] = make_split(lang, n_test, with_noise=False)
        corpora[lang] = Corpus(lang, splits, tagset, scheme="tags")
    return corpora
