"""Left-to-right language-model pretraining for either language side.

Both sides use a causal stack without cross-attention. The source-side LM
uses encoder parameter names and a bias-free head tied to ``src_embed``; the
target-side LM uses decoder names, the tied ``tgt_embed`` head and
``tgt_out_bias``. Either checkpoint can therefore be copied straight into a
translator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import MonolingualExample, iterate_batches
from .errors import ConfigError
from .evaluation import perplexity
from .losses import lm_loss
from .training import TrainResult, TrainSettings, run_training
from .transformer import ModelConfig, init_parameters, lm_parameter_names

__all__ = ["LMTask", "lm_config", "lm_loss", "train_lm"]


@dataclass(frozen=True)
class LMTask:
    side: str
    lm_layers: int
    stack: str = "decoder-without-cross-attention"

    def __post_init__(self):
        if self.side not in ("src", "tgt"):
            raise ConfigError(f"LM side must be 'src' or 'tgt', got {self.side!r}")
        if self.lm_layers < 1:
            raise ConfigError("an LM needs at least one layer")

    def to_dict(self) -> dict:
        return asdict(self)


def lm_config(base: ModelConfig, task: LMTask) -> ModelConfig:
    """LM architecture matching ``base`` except for depth on ``task.side``."""
    if task.side == "src":
        if base.enc_layers and task.lm_layers > base.enc_layers:
            raise ConfigError(f"LM depth {task.lm_layers} exceeds encoder depth {base.enc_layers}")
        return replace(base, enc_layers=task.lm_layers, dec_layers=0)
    if base.dec_layers and task.lm_layers > base.dec_layers:
        raise ConfigError(f"LM depth {task.lm_layers} exceeds decoder depth {base.dec_layers}")
    return replace(base, enc_layers=0, dec_layers=task.lm_layers)


def side_seed(seed: int, side: str) -> int:
    return int(np.random.SeedSequence([seed, 0 if side == "src" else 1]).generate_state(1)[0])


def train_lm(
    task: LMTask,
    config: ModelConfig,
    train: Sequence[MonolingualExample],
    dev: Sequence[MonolingualExample],
    settings: TrainSettings,
    seed: int,
    out_dir: Path | None = None,
    step_log: Path | None = None,
) -> TrainResult:
    """Pretrain one side's LM; ``config`` must already be an LM config.

    The two sides draw from disjoint RNG streams even under the same seed.
    """
    run_seed = side_seed(seed, task.side)
    params = init_parameters(config, run_seed, lm_parameter_names(config, task.side))
    batches = iterate_batches(train, settings.token_budget, settings.bucket_width, seed=run_seed, side=task.side)

    def loss_fn(tensors, batch, rng):
        return lm_loss(tensors, config, batch, side=task.side, rng=rng)

    def evaluate(p):
        return perplexity(p, config, dev, mode="lm", side=task.side, token_budget=settings.token_budget)

    def make_checkpoint(p, step, metrics):
        return Checkpoint(
            params={k: v.copy() for k, v in p.items()},
            config=config,
            step=step,
            seed=seed,
            kind="lm",
            metrics=metrics,
            extra={"lm_task": task.to_dict(), "settings": settings.to_dict()},
        )

    return run_training(
        params, loss_fn, batches, settings, evaluate, make_checkpoint,
        seed=run_seed, out_dir=out_dir, mode=f"lm-{task.side}", step_log=step_log,
    )
