"""Byte-pair-encoding subword models, one per language side.

Text is NFC-normalized and whitespace-collapsed before training and encoding.
Each word is split into characters, the first of which carries the
word-boundary marker ``▁``; merges are learned greedily by pair frequency with
ties broken by the lexicographically smallest pair.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, EwcNmtError

MARKER = "▁"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MERGES_HEADER = "#MERGES"


class ModelFormatError(EwcNmtError, ValueError):
    pass


def normalize(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


def _word_symbols(word: str) -> list[str]:
    return [MARKER + word[0], *word[1:]]


@dataclass
class SubwordModel:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _itos: list[str] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._itos = [""] * len(self.vocab)
        for tok, idx in self.vocab.items():
            if not 0 <= idx < len(self.vocab) or self._itos[idx]:
                raise ModelFormatError(f"vocabulary ids are not contiguous at {tok!r} -> {idx}")
            self._itos[idx] = tok
        for i, name in enumerate(SPECIALS):
            if self.vocab.get(name) != i:
                raise ModelFormatError(f"special token {name} must have id {i}")

    @property
    def size(self) -> int:
        return len(self.vocab)

    pad_id, bos_id, eos_id, unk_id = PAD, BOS, EOS, UNK

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def segment(self, word: str) -> list[str]:
        symbols = _word_symbols(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            left, right = self.merges[best]
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def encode(self, text: str) -> list[int]:
        """Token ids for one line, framed by BOS and EOS."""
        ids = [BOS]
        for word in normalize(text).split(" "):
            if not word:
                continue
            cached = self._cache.get(word)
            if cached is None:
                cached = tuple(self.vocab.get(s, UNK) for s in self.segment(word))
                self._cache[word] = cached
            ids.extend(cached)
        ids.append(EOS)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        pieces = []
        n = self.size
        for idx in ids:
            idx = int(idx)
            if not 0 <= idx < n:
                raise IndexError(f"token id {idx} out of range for vocabulary of size {n}")
            if idx in (PAD, BOS, EOS):
                continue
            pieces.append(MARKER + SPECIALS[UNK] if idx == UNK else self._itos[idx])
        return "".join(pieces).replace(MARKER, " ").strip()

    # -- persistence ---------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"bpe-vocab\t{self.size}"]
        lines += [f"{tok}\t{idx}" for idx, tok in enumerate(self._itos)]
        lines.append(MERGES_HEADER)
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "SubwordModel":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split("\t") if lines else []
        if len(head) != 2 or head[0] != "bpe-vocab":
            raise ModelFormatError("missing 'bpe-vocab' header line")
        n = int(head[1])
        vocab = {}
        for line in lines[1 : n + 1]:
            tok, idx = line.rsplit("\t", 1)
            vocab[tok] = int(idx)
        if len(vocab) != n or lines[n + 1] != MERGES_HEADER:
            raise ModelFormatError("vocabulary section does not match header size")
        merges = []
        for line in lines[n + 2 :]:
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(merges=merges, vocab=vocab)

    @classmethod
    def load(cls, path) -> "SubwordModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: Iterable[str], vocab_size: int, min_frequency: int = 2) -> SubwordModel:
    """Learn merges until ``vocab_size`` is reached or no pair occurs
    ``min_frequency`` times."""
    words: Counter[str] = Counter()
    for line in corpus:
        words.update(w for w in normalize(line).split(" ") if w)
    if not words:
        raise DataError("cannot train BPE on an empty corpus")

    seqs = {w: _word_symbols(w) for w in words}
    alphabet = sorted({s for seq in seqs.values() for s in seq})
    if vocab_size <= len(alphabet) + len(SPECIALS):
        raise ConfigError(
            f"vocab_size {vocab_size} must exceed {len(alphabet)} base symbols + {len(SPECIALS)} specials"
        )
    vocab = {name: i for i, name in enumerate(SPECIALS)}
    for sym in alphabet:
        vocab[sym] = len(vocab)

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        counts: Counter[tuple[str, str]] = Counter()
        for w, seq in seqs.items():
            f = words[w]
            for pair in zip(seq, seq[1:]):
                counts[pair] += f
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < min_frequency:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        left, right = pair
        merged_sym = left + right
        merges.append(pair)
        if merged_sym not in vocab:
            vocab[merged_sym] = len(vocab)
        for w, seq in seqs.items():
            if len(seq) < 2:
                continue
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
                    out.append(merged_sym)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out
    return SubwordModel(merges=merges, vocab=vocab)
