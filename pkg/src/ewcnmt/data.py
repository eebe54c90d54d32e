"""Corpus loading, length-bucketed token-budget batching and held-out splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .tokenizer import PAD, SubwordModel

DEFAULT_BUCKET_WIDTH = 8


@dataclass(frozen=True)
class ParallelExample:
    src_ids: tuple[int, ...]
    tgt_ids: tuple[int, ...]
    line: int = 0

    @property
    def length(self) -> int:
        return max(len(self.src_ids), len(self.tgt_ids))


@dataclass(frozen=True)
class MonolingualExample:
    ids: tuple[int, ...]
    line: int = 0

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass
class Batch:
    """A padded batch. ``ids``/``mask`` hold the target side for parallel data
    and the sentence itself for monolingual data."""

    side: str  # "src", "tgt" or "parallel"
    ids: np.ndarray
    mask: np.ndarray
    src_ids: np.ndarray | None = None
    src_mask: np.ndarray | None = None
    indices: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def cells(self) -> int:
        if self.src_ids is None:
            return self.ids.size
        return self.size * max(self.ids.shape[1], self.src_ids.shape[1])


def _read_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().split("\n")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc


def _strip_trailing(lines: list[str]) -> list[str]:
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return lines


def load_corpus(path, model: SubwordModel) -> list[MonolingualExample]:
    """One example per non-empty line, in file order."""
    out = []
    for n, line in enumerate(_strip_trailing(_read_lines(path)), start=1):
        if line.strip():
            out.append(MonolingualExample(tuple(model.encode(line)), line=n))
    return out


def load_parallel(src_path, tgt_path, src_model: SubwordModel, tgt_model: SubwordModel) -> list[ParallelExample]:
    """Line-aligned pairs; a pair is dropped when either side is blank."""
    src = _strip_trailing(_read_lines(src_path))
    tgt = _strip_trailing(_read_lines(tgt_path))
    if len(src) != len(tgt):
        raise DataError(
            f"parallel files are misaligned at line {min(len(src), len(tgt)) + 1}: "
            f"{src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}"
        )
    out = []
    for n, (s, t) in enumerate(zip(src, tgt), start=1):
        if s.strip() and t.strip():
            out.append(ParallelExample(tuple(src_model.encode(s)), tuple(tgt_model.encode(t)), line=n))
    return out


def read_text(path) -> list[str]:
    return [line for line in _strip_trailing(_read_lines(path))]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def collate(examples: Sequence, side: str | None = None, indices: Sequence[int] = ()) -> Batch:
    if not examples:
        raise DataError("cannot collate an empty batch")
    if isinstance(examples[0], ParallelExample):
        src, src_mask = _pad([e.src_ids for e in examples])
        tgt, tgt_mask = _pad([e.tgt_ids for e in examples])
        return Batch("parallel", tgt, tgt_mask, src, src_mask, tuple(indices))
    ids, mask = _pad([e.ids for e in examples])
    return Batch(side or "tgt", ids, mask, indices=tuple(indices))


def make_batches(
    examples: Sequence,
    token_budget: int,
    bucket_width: int = DEFAULT_BUCKET_WIDTH,
    seed: int = 0,
    side: str | None = None,
) -> list[Batch]:
    """One epoch of batches.

    Examples are grouped by ``length // bucket_width``; within a shuffled
    bucket, batches are filled greedily while ``n * max_length`` (the padded
    cells of the longer side) stays within ``token_budget``. Bucket contents
    and the final batch order are shuffled with ``seed``.
    """
    if token_budget <= 0 or bucket_width <= 0:
        raise ConfigError("token_budget and bucket_width must be positive")
    rng = np.random.default_rng(seed)
    buckets: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        if ex.length > token_budget:
            raise DataError(f"example at line {ex.line} has {ex.length} tokens, more than the budget {token_budget}")
        buckets.setdefault(ex.length // bucket_width, []).append(i)

    groups: list[list[int]] = []
    for key in sorted(buckets):
        members = buckets[key]
        order = [members[j] for j in rng.permutation(len(members))]
        current: list[int] = []
        longest = 0
        for i in order:
            n = examples[i].length
            if current and (len(current) + 1) * max(longest, n) > token_budget:
                groups.append(current)
                current, longest = [], 0
            current.append(i)
            longest = max(longest, n)
        if current:
            groups.append(current)
    groups = [groups[j] for j in rng.permutation(len(groups))]
    return [collate([examples[i] for i in g], side=side, indices=g) for g in groups]


def iterate_batches(
    examples: Sequence,
    token_budget: int,
    bucket_width: int = DEFAULT_BUCKET_WIDTH,
    seed: int = 0,
    side: str | None = None,
) -> Iterator[Batch]:
    """Endless stream of epochs; epoch ``e`` is shuffled with ``(seed, e)``."""
    epoch = 0
    while True:
        epoch_seed = int(np.random.default_rng([seed, epoch]).integers(2**31))
        yield from make_batches(examples, token_budget, bucket_width, epoch_seed, side)
        epoch += 1


def split_held_out(examples: Sequence, fraction: float, seed: int = 0) -> tuple[list, list]:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"held-out fraction must lie in (0, 1), got {fraction}")
    n = len(examples)
    k = int(round(n * fraction))
    if k == 0 or k == n:
        raise ConfigError(f"held-out fraction {fraction} of {n} examples leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    held = set(perm[:k].tolist())
    train = [e for i, e in enumerate(examples) if i not in held]
    held_out = [e for i, e in enumerate(examples) if i in held]
    return train, held_out


def write_lines(path, lines) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
