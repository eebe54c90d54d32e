"""Beam search and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, log_softmax
from .errors import ConfigError
from .tokenizer import BOS, EOS, SubwordModel
from .transformer import MaskMode, ModelConfig, decode_step_logits, encode

StepFn = Callable[[Sequence[tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]  # BOS-prefixed
    logprob: float
    finished: bool
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float) -> float:
        n = self.length
        return self.logprob / (n**alpha) if n else self.logprob


def search(step_logprobs: StepFn, beam_size: int, alpha: float, max_len: int, bos: int = BOS, eos: int = EOS) -> BeamHypothesis:
    """Beam search over any next-token distribution.

    ``step_logprobs(prefixes)`` returns an ``(n, vocab)`` array of
    log-probabilities. Candidates are ranked by cumulative log-probability
    (ties: lower parent rank, then lower token id); hypotheses ending in EOS
    are retired, shrinking the beam. The result maximizes
    ``logprob / length**alpha`` among retired hypotheses.
    """
    if beam_size < 1 or max_len < 1:
        raise ConfigError("beam_size and max_len must be at least 1")
    live = [BeamHypothesis((bos,), 0.0, False)]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        width = beam_size - len(finished)
        if width <= 0 or not live:
            break
        lp = np.asarray(step_logprobs([h.tokens for h in live]), dtype=np.float64)
        n, vocab = lp.shape
        total = np.array([h.logprob for h in live])[:, None] + lp
        parent = np.repeat(np.arange(n), vocab)
        token = np.tile(np.arange(vocab), n)
        order = np.lexsort((token, parent, -total.reshape(-1)))[:width]
        nxt = []
        for j in order:
            i, v = int(parent[j]), int(token[j])
            hyp = BeamHypothesis(live[i].tokens + (v,), float(total[i, v]), v == eos)
            (finished if hyp.finished else nxt).append(hyp)
        live = nxt
    if finished:
        return max(finished, key=lambda h: (h.score(alpha), -len(h.tokens)))
    best = max(live, key=lambda h: h.score(alpha))
    return BeamHypothesis(best.tokens, best.logprob, False, truncated=True)


def greedy(step_logprobs: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> BeamHypothesis:
    tokens, logprob = (bos,), 0.0
    for _ in range(max_len):
        lp = np.asarray(step_logprobs([tokens]), dtype=np.float64)[0]
        v = int(np.argmax(lp))
        tokens += (v,)
        logprob += float(lp[v])
        if v == eos:
            return BeamHypothesis(tokens, logprob, True)
    return BeamHypothesis(tokens, logprob, False, truncated=True)


def model_step_fn(params, config: ModelConfig, src_ids: Sequence[int]) -> StepFn:
    """Next-token log-probabilities of the translator for one source sentence."""
    src = np.asarray([src_ids], dtype=np.int64)
    src_mask = np.ones_like(src, dtype=bool)
    states = encode(params, config, src, src_mask, MaskMode.BIDIRECTIONAL).data

    def step(prefixes):
        n = len(prefixes)
        tgt = np.asarray(prefixes, dtype=np.int64)
        logits = decode_step_logits(
            params, config, tgt, np.ones_like(tgt, dtype=bool),
            Tensor(np.repeat(states, n, axis=0)), np.repeat(src_mask, n, axis=0),
        )
        return log_softmax(logits.data[:, -1, :].astype(np.float64))

    return step


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def beam_search(params, config: ModelConfig, src_ids: Sequence[int], beam_size: int = 8, alpha: float = 1.0, max_len: int | None = None) -> BeamHypothesis:
    step = model_step_fn(params, config, src_ids)
    return search(step, beam_size, alpha, max_len or default_max_len(len(src_ids)))


def greedy_decode(params, config: ModelConfig, src_ids: Sequence[int], max_len: int | None = None) -> BeamHypothesis:
    return greedy(model_step_fn(params, config, src_ids), max_len or default_max_len(len(src_ids)))


def translate_lines(
    params,
    config: ModelConfig,
    src_model: SubwordModel,
    tgt_model: SubwordModel,
    lines: Sequence[str],
    beam_size: int = 8,
    alpha: float = 1.0,
) -> list[str]:
    out = []
    for line in lines:
        hyp = beam_search(params, config, src_model.encode(line), beam_size, alpha)
        out.append(tgt_model.decode(hyp.tokens))
    return out
