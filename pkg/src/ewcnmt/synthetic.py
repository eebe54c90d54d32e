"""Bundled synthetic translation task.

The source language is generated by a small grammar with Zipfian word choice
and class agreement between nouns, verbs and adjectives. The target is a
word-by-word dictionary translation with two local reorderings: adjectives
follow their noun, and prepositions become postpositions. Content words have
up to three target synonyms drawn with fixed skewed probabilities, so the
target side keeps some irreducible entropy and a model that memorizes the
small parallel set overfits. Everything is deterministic in the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_lines

FILES = (
    "mono.src", "mono.tgt", "heldout.src", "heldout.tgt",
    "train.src", "train.tgt", "dev.src", "dev.tgt", "test.src", "test.tgt",
)

SRC_SYLLABLES = ["ka", "lo", "mi", "te", "ru", "sa", "no", "pe", "vi", "da", "zu", "ho", "ki", "be", "fa", "go"]
TGT_SYLLABLES = ["ar", "el", "om", "ix", "un", "ys", "ek", "ol", "ut", "ad", "ir", "of", "eb", "up", "yn", "az"]

N_CLASSES = 4
SIZES = {"det": 4, "noun": 80, "verb": 40, "adj": 30, "prep": 6, "adv": 10}
CONTENT = ("noun", "verb", "adj", "adv")
SYNONYM_WEIGHTS = {1: (1.0,), 2: (0.7, 0.3), 3: (0.6, 0.3, 0.1)}


@dataclass
class Lexicon:
    words: dict[str, list[str]]
    noun_class: list[int]
    verb_subj: list[set[int]]
    verb_obj: list[set[int]]
    adj_classes: list[set[int]]
    translation: dict[str, list[str]]


def _pseudo_words(rng: np.random.Generator, syllables: list[str], count: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < count:
        n = int(rng.integers(2, 4))
        w = "".join(syllables[int(i)] for i in rng.integers(0, len(syllables), size=n))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def build_lexicon(seed: int = 0) -> Lexicon:
    rng = np.random.default_rng([seed, 101])
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()
    words, translation = {}, {}
    for cat, n in SIZES.items():
        src = _pseudo_words(rng, SRC_SYLLABLES, n, src_taken)
        counts = rng.integers(1, 4, size=n) if cat in CONTENT else np.ones(n, dtype=int)
        tgt = _pseudo_words(rng, TGT_SYLLABLES, int(counts.sum()), tgt_taken)
        words[cat] = src
        starts = np.concatenate([[0], np.cumsum(counts)])
        for i, w in enumerate(src):
            translation[w] = tgt[starts[i] : starts[i + 1]]
    noun_class = [i % N_CLASSES for i in range(SIZES["noun"])]
    pick = lambda k: set(int(c) for c in rng.choice(N_CLASSES, size=k, replace=False))  # noqa: E731
    verb_subj = [pick(int(rng.integers(1, 3))) for _ in range(SIZES["verb"])]
    verb_obj = [pick(int(rng.integers(1, 3))) for _ in range(SIZES["verb"])]
    adj_classes = [pick(2) for _ in range(SIZES["adj"])]
    return Lexicon(words, noun_class, verb_subj, verb_obj, adj_classes, translation)


def _zipf(rng: np.random.Generator, n: int, allowed=None) -> int:
    idx = np.arange(n) if allowed is None else np.asarray(allowed)
    cdf = np.cumsum(1.0 / (idx + 1.0))
    return int(idx[min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(idx) - 1)])


class Grammar:
    def __init__(self, lex: Lexicon):
        self.lex = lex
        self.nouns_by_class = [
            [i for i, c in enumerate(lex.noun_class) if c == k] for k in range(N_CLASSES)
        ]

    def _noun(self, rng, classes) -> int:
        pool = sorted(i for k in classes for i in self.nouns_by_class[k])
        return _zipf(rng, SIZES["noun"], pool)

    def _np(self, rng, classes, allow_pp: bool) -> list[tuple[str, str]]:
        lex = self.lex
        n = self._noun(rng, classes)
        out = [("det", lex.words["det"][_zipf(rng, SIZES["det"])])]
        if rng.random() < 0.5:
            cls = lex.noun_class[n]
            adjs = [i for i, s in enumerate(lex.adj_classes) if cls in s]
            out.append(("adj", lex.words["adj"][_zipf(rng, SIZES["adj"], adjs)]))
        out.append(("noun", lex.words["noun"][n]))
        if allow_pp and rng.random() < 0.3:
            out.append(("prep", lex.words["prep"][_zipf(rng, SIZES["prep"])]))
            out += [tok for tok in self._np(rng, range(N_CLASSES), False) if tok[0] != "adj"]
        return out

    def sentence(self, rng) -> list[tuple[str, str]]:
        lex = self.lex
        v = _zipf(rng, SIZES["verb"])
        out = self._np(rng, lex.verb_subj[v], True)
        out.append(("verb", lex.words["verb"][v]))
        if rng.random() < 0.7:
            out += self._np(rng, lex.verb_obj[v], True)
        if rng.random() < 0.3:
            out.append(("adv", lex.words["adv"][_zipf(rng, SIZES["adv"])]))
        return out


def translate(lex: Lexicon, tagged: list[tuple[str, str]], rng: np.random.Generator) -> list[str]:
    toks = list(tagged)
    i = 0
    while i < len(toks) - 1:
        if toks[i][0] == "adj" and toks[i + 1][0] == "noun":
            toks[i], toks[i + 1] = toks[i + 1], toks[i]
            i += 2
        else:
            i += 1
    i = 0
    while i < len(toks):
        if toks[i][0] == "prep" and i + 2 < len(toks) and toks[i + 1][0] == "det" and toks[i + 2][0] == "noun":
            toks[i : i + 3] = [toks[i + 1], toks[i + 2], toks[i]]
            i += 3
        else:
            i += 1
    out = []
    for _, w in toks:
        options = lex.translation[w]
        k = 0 if len(options) == 1 else int(rng.choice(len(options), p=SYNONYM_WEIGHTS[len(options)]))
        out.append(options[k])
    return out


def generate_task(
    seed: int = 0, n_mono: int = 10000, n_held: int = 500, n_train: int = 600, n_dev: int = 150, n_test: int = 150
) -> dict[str, list[str]]:
    """Monolingual corpora and held-out sets per side, plus parallel splits.

    Each side's monolingual and held-out text come from their own sentence
    streams, so neither overlaps the parallel data by construction.
    """
    lex = build_lexicon(seed)
    g = Grammar(lex)

    def sample(stream: int, n: int) -> tuple[list[str], list[str]]:
        rng = np.random.default_rng([seed, stream])
        src, tgt = [], []
        for _ in range(n):
            tagged = g.sentence(rng)
            src.append(" ".join(w for _, w in tagged))
            tgt.append(" ".join(translate(lex, tagged, rng)))
        return src, tgt

    out = {
        "mono.src": sample(1, n_mono)[0],
        "mono.tgt": sample(2, n_mono)[1],
        "heldout.src": sample(4, n_held)[0],
        "heldout.tgt": sample(5, n_held)[1],
    }
    src, tgt = sample(3, n_train + n_dev + n_test)
    bounds = {"train": (0, n_train), "dev": (n_train, n_train + n_dev), "test": (n_train + n_dev, n_train + n_dev + n_test)}
    for name, (a, b) in bounds.items():
        out[f"{name}.src"] = src[a:b]
        out[f"{name}.tgt"] = tgt[a:b]
    return out


def write_task(out_dir, seed: int = 0, **sizes) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, lines in generate_task(seed, **sizes).items():
        paths[name] = out_dir / name
        write_lines(paths[name], lines)
    return paths
