"""Translator initialization from pretrained LMs and regularized fine-tuning.

Three regularization modes are supported: ``none``; ``ewc``, which anchors
the transferred parameters with a Fisher-weighted quadratic penalty; and
``lm_objective``, which keeps training the pretrained stacks on their
language-modeling losses alongside translation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import Batch, MonolingualExample, ParallelExample, iterate_batches
from .errors import CompatibilityError, ConfigError
from .evaluation import perplexity
from .ewc import AnchorParams, EWCTerm, ewc_terms_penalty
from .losses import lm_loss, mt_loss
from .optim import AdamState
from .training import TrainResult, TrainSettings, run_training
from .transformer import ModelConfig, decoder_layer_names, encoder_layer_names, init_parameters

log = logging.getLogger(__name__)

__all__ = [
    "BatchBundle", "RegMode", "SideTransfer", "TransferPlan",
    "mt_loss", "total_loss", "train_translator", "transfer_init", "transferred_names",
]


@dataclass(frozen=True)
class SideTransfer:
    checkpoint: Checkpoint
    layers: int | None = None  # defaults to the LM depth


@dataclass(frozen=True)
class TransferPlan:
    src: SideTransfer | None = None
    tgt: SideTransfer | None = None
    seed: int = 0


@dataclass(frozen=True)
class RegMode:
    kind: str = "none"  # "none", "ewc" or "lm_objective"
    ewc_src: EWCTerm | None = None
    ewc_tgt: EWCTerm | None = None
    lm_weight: float = 1.0
    lm_sides: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("none", "ewc", "lm_objective"):
            raise ConfigError(f"unknown regularization mode {self.kind!r}")
        if self.kind == "ewc" and self.ewc_src is None and self.ewc_tgt is None:
            raise ConfigError("reg=ewc needs a Fisher map and anchor for at least one side")
        if self.kind == "lm_objective" and not self.lm_sides:
            raise ConfigError("reg=lm_objective needs monolingual data for at least one side")


@dataclass
class BatchBundle:
    parallel: Batch
    mono: dict[str, Batch] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.parallel.size


def _lm_depth(ckpt: Checkpoint, side: str) -> int:
    return ckpt.config.enc_layers if side == "src" else ckpt.config.dec_layers


def transferred_names(config: ModelConfig, side: str, layers: int) -> list[str]:
    """Embeddings plus the bottom ``layers`` layers of one stack
    (self-attention, feed-forward and their norms)."""
    if side == "src":
        names = ["src_embed"]
        for i in range(layers):
            names += encoder_layer_names(i)
    else:
        names = ["tgt_embed", "tgt_out_bias"]
        if not config.tie_tgt_embeddings:
            names.append("tgt_out_proj")
        for i in range(layers):
            names += decoder_layer_names(i, cross=False)
    return sorted(names)


def _check_compatible(config: ModelConfig, side: str, st: SideTransfer) -> int:
    lm = st.checkpoint
    if lm.kind not in ("lm", "average") or "lm_task" not in lm.extra:
        raise CompatibilityError(f"{side} transfer source is not a language-model checkpoint")
    if lm.extra["lm_task"]["side"] != side:
        raise CompatibilityError(f"checkpoint is a {lm.extra['lm_task']['side']}-side LM, expected {side}")
    depth = _lm_depth(lm, side)
    layers = depth if st.layers is None else st.layers
    nmt_depth = config.enc_layers if side == "src" else config.dec_layers
    if not 0 <= layers <= min(depth, nmt_depth):
        raise ConfigError(f"cannot transfer {layers} {side} layers from a {depth}-layer LM into {nmt_depth} layers")
    mismatched = []
    for key in ("model_dim", "ff_dim", "heads", "tie_tgt_embeddings", "src_vocab" if side == "src" else "tgt_vocab"):
        if getattr(lm.config, key) != getattr(config, key):
            mismatched.append(key)
    if mismatched:
        names = [n for n in transferred_names(config, side, layers) if n in lm.params]
        raise CompatibilityError(f"{side} LM differs in {mismatched}; affected parameters: {names[:8]}")
    return layers


def transfer_init(config: ModelConfig, plan: TransferPlan) -> tuple[dict, dict[str, AnchorParams], AdamState]:
    """Fresh translator with the planned LM parameters copied in.

    Returns the parameter store, the anchors (exact copies of what was
    transferred, per side) and a zeroed optimizer state.
    """
    params = init_parameters(config, plan.seed)
    anchors: dict[str, AnchorParams] = {}
    for side, st in (("src", plan.src), ("tgt", plan.tgt)):
        if st is None:
            continue
        layers = _check_compatible(config, side, st)
        names = transferred_names(config, side, layers)
        bad = [n for n in names if n not in st.checkpoint.params or st.checkpoint.params[n].shape != params[n].shape]
        if bad:
            raise CompatibilityError(f"{side} LM cannot supply parameters {bad[:8]}")
        for n in names:
            params[n] = np.array(st.checkpoint.params[n], dtype=np.float32, copy=True)
        anchors[side] = AnchorParams({n: params[n] for n in names}, source=st.checkpoint.id)
    return params, anchors, AdamState.zeros(params)


def total_loss(params, config: ModelConfig, bundle: BatchBundle, reg: RegMode, rng=None):
    loss = mt_loss(params, config, bundle.parallel, rng)
    if reg.kind == "ewc":
        return loss + ewc_terms_penalty(params, reg.ewc_src, reg.ewc_tgt)
    if reg.kind == "lm_objective":
        extra = None
        for side in reg.lm_sides:
            if side not in bundle.mono:
                raise ConfigError(f"reg=lm_objective needs a {side}-side monolingual batch")
            term = lm_loss(params, config, bundle.mono[side], side=side, rng=rng)
            extra = term if extra is None else extra + term
        return loss + extra * reg.lm_weight
    return loss


def _bundles(parallel: Iterator[Batch], mono: dict[str, Iterator[Batch]]) -> Iterator[BatchBundle]:
    while True:
        b = next(parallel)
        yield BatchBundle(b, {side: next(it) for side, it in mono.items()})


def train_translator(
    config: ModelConfig,
    params: dict[str, np.ndarray],
    reg: RegMode,
    train: Sequence[ParallelExample],
    dev: Sequence[ParallelExample],
    settings: TrainSettings,
    seed: int,
    out_dir: Path | None = None,
    step_log: Path | None = None,
    mono: dict[str, Sequence[MonolingualExample]] | None = None,
    state: AdamState | None = None,
    manifest_extra: dict | None = None,
) -> TrainResult:
    """Fine-tune ``params`` in place; dev perplexity picks the best checkpoints.

    ``mono`` is consulted only for ``reg.kind == "lm_objective"``.
    """
    for term in (reg.ewc_src, reg.ewc_tgt):
        if term is None:
            continue
        for name in term.anchor.keys():
            if name not in params or params[name].shape != term.anchor.values[name].shape:
                raise CompatibilityError(f"anchored parameter {name!r} does not match the translator")
    mono_iters: dict[str, Iterator[Batch]] = {}
    if reg.kind == "lm_objective":
        mono = mono or {}
        for side in reg.lm_sides:
            if not mono.get(side):
                raise ConfigError(f"reg=lm_objective needs {side}-side monolingual examples")
            side_seed = int(np.random.SeedSequence([seed, 7, 0 if side == "src" else 1]).generate_state(1)[0])
            mono_iters[side] = iterate_batches(mono[side], settings.token_budget, settings.bucket_width, side_seed, side)
    batches = _bundles(iterate_batches(train, settings.token_budget, settings.bucket_width, seed), mono_iters)

    def loss_fn(tensors, bundle, rng):
        return total_loss(tensors, config, bundle, reg, rng)

    def evaluate(p):
        return perplexity(p, config, dev, mode="mt", token_budget=settings.token_budget)

    extra = {"reg": reg.kind, "settings": settings.to_dict(), **(manifest_extra or {})}

    def make_checkpoint(p, step, metrics):
        return Checkpoint({k: v.copy() for k, v in p.items()}, config, step, seed, "nmt", metrics, dict(extra))

    return run_training(
        params, loss_fn, batches, settings, evaluate, make_checkpoint,
        seed=seed, out_dir=out_dir, mode=reg.kind, step_log=step_log, state=state,
    )
