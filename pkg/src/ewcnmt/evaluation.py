"""Corpus BLEU, perplexity and checkpoint averaging."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import make_batches
from .errors import ContractError, DataError
from .losses import lm_loss, mt_loss
from .transformer import ModelConfig


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        return f"BLEU = {self.score:.2f}"

    def breakdown(self) -> str:
        pr = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return f"{self} {pr} (BP = {self.brevity_penalty:.3f}, hyp_len = {self.hyp_len}, ref_len = {self.ref_len})"


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4, smooth: bool = False) -> BleuResult:
    """Corpus BLEU on whitespace tokens, 0..100.

    Clipped n-gram counts are pooled over the corpus. With ``smooth`` every
    precision becomes ``(matches + 1) / (total + 1)``.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if smooth:
        precisions = [(m + 1) / (t + 1) for m, t in zip(matches, totals)]
    else:
        precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, hyp_len, ref_len)


def nll_totals(params, config: ModelConfig, examples: Sequence, mode: str, side: str = "tgt", token_budget: int = 4096) -> tuple[float, int]:
    """Summed token NLL and token count, dropout off, fixed batch order."""
    if len(examples) == 0:
        raise DataError("cannot evaluate on an empty corpus")
    budget = max(token_budget, max(e.length for e in examples))
    total, count = 0.0, 0
    for batch in make_batches(examples, budget, seed=0, side=side):
        if mode == "mt":
            loss = mt_loss(params, config, batch, reduction="sum")
        elif mode == "lm":
            loss = lm_loss(params, config, batch, side=side, reduction="sum")
        else:
            raise ValueError(f"unknown perplexity mode {mode!r}")
        total += float(loss.data)
        count += int(batch.mask[:, 1:].sum())
    return total, count


def perplexity(params, config: ModelConfig, examples: Sequence, mode: str = "mt", side: str = "tgt", token_budget: int = 4096) -> float:
    """``exp`` of the mean per-token NLL over the whole corpus."""
    total, count = nll_totals(params, config, examples, mode, side, token_budget)
    return math.exp(total / count)


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Coordinatewise mean; inputs are summed in content-id order in float64."""
    if not checkpoints:
        raise ContractError("nothing to average")
    first = checkpoints[0]
    names = sorted(first.params)
    for ck in checkpoints[1:]:
        if ck.config != first.config:
            raise ContractError("cannot average checkpoints with different model configs")
        other = sorted(ck.params)
        if other != names:
            diff = sorted(set(names) ^ set(other))[0]
            raise ContractError(f"checkpoint schemas differ at parameter {diff!r}")
        for n in names:
            if ck.params[n].shape != first.params[n].shape:
                raise ContractError(f"checkpoint schemas differ at parameter {n!r}")
    ordered = sorted(checkpoints, key=lambda c: c.id)
    k = float(len(ordered))
    averaged = {}
    for n in names:
        acc = np.zeros(first.params[n].shape, dtype=np.float64)
        for ck in ordered:
            acc += ck.params[n]
        averaged[n] = (acc / k).astype(np.float32)
    return Checkpoint(
        params=averaged,
        config=first.config,
        step=max(c.step for c in ordered),
        seed=first.seed,
        kind="average",
        extra={"constituents": [c.id for c in ordered], "source_kind": first.kind, **(
            {"lm_task": first.extra["lm_task"]} if "lm_task" in first.extra else {}
        )},
    )
