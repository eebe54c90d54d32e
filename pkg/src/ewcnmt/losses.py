"""Token-level training objectives for the translator and the language models."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import EmptyBatchError
from .transformer import MaskMode, ModelConfig, decode_step_logits, encode, lm_logits


def _shifted(ids: np.ndarray, mask: np.ndarray):
    if ids.shape[0] == 0 or ids.shape[1] < 2 or not mask[:, 1:].any():
        raise EmptyBatchError("batch has no tokens to predict")
    return ids[:, :-1], mask[:, :-1], ids[:, 1:], mask[:, 1:]


def lm_loss(params, config: ModelConfig, batch: Batch, side: str | None = None, rng=None, reduction: str = "mean") -> Tensor:
    """Next-token NLL: positions 0..L-2 predict 1..L-1, padding excluded."""
    side = side or batch.side
    inp, inp_mask, tgt, tgt_mask = _shifted(batch.ids, batch.mask)
    logits = lm_logits(params, config, side, inp, inp_mask, rng)
    return ad.cross_entropy(logits, tgt, tgt_mask, reduction=reduction)


def mt_loss(params, config: ModelConfig, batch: Batch, rng=None, reduction: str = "mean") -> Tensor:
    """Teacher-forced NLL of the target given the source."""
    if batch.src_ids is None:
        raise EmptyBatchError("translation loss needs a parallel batch")
    inp, inp_mask, tgt, tgt_mask = _shifted(batch.ids, batch.mask)
    states = encode(params, config, batch.src_ids, batch.src_mask, MaskMode.BIDIRECTIONAL, rng)
    logits = decode_step_logits(params, config, inp, inp_mask, states, batch.src_mask, rng)
    return ad.cross_entropy(logits, tgt, tgt_mask, reduction=reduction)
