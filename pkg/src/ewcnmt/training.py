"""Shared optimization loop for language-model pretraining and fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, dump_json, save_checkpoint
from .errors import NumericError
from .optim import AdamState, Schedule, adam_step, lr_at_step

log = logging.getLogger(__name__)

STEP_LOG_FIELDS = ["step", "wall_seconds", "examples_seen", "train_loss", "dev_perplexity", "mode"]


@dataclass(frozen=True)
class TrainSettings:
    schedule: Schedule = field(default_factory=Schedule)
    clip_norm: float = 1.0
    token_budget: int = 512
    bucket_width: int = 8
    max_steps: int = 2000
    eval_every: int = 500
    keep_best: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        if "schedule" in d and not isinstance(d["schedule"], Schedule):
            d["schedule"] = Schedule(**d["schedule"])
        return cls(**d)


@dataclass
class EvalPoint:
    step: int
    examples_seen: int
    wall_seconds: float
    train_loss: float
    dev_perplexity: float
    mean_step_ms: float
    checkpoint: str = ""


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EvalPoint]
    best: Path | None
    top_k: list[Path]
    last: Path | None
    mean_step_ms: float

    @property
    def best_dev_perplexity(self) -> float:
        return min(p.dev_perplexity for p in self.history)


class StepLog:
    """Append-only CSV step log."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(STEP_LOG_FIELDS)

    def write(self, point: EvalPoint, mode: str) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [point.step, f"{point.wall_seconds:.3f}", point.examples_seen,
                 f"{point.train_loss:.6f}", f"{point.dev_perplexity:.6f}", mode]
            )


def run_training(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[dict, object, np.random.Generator], ad.Tensor],
    batches: Iterator,
    settings: TrainSettings,
    evaluate: Callable[[dict[str, np.ndarray]], float],
    make_checkpoint: Callable[[dict[str, np.ndarray], int, list], Checkpoint],
    seed: int,
    out_dir: Path | None = None,
    mode: str = "train",
    step_log: Path | None = None,
    state: AdamState | None = None,
) -> TrainResult:
    """Run ``settings.max_steps`` Adam steps, evaluating every
    ``settings.eval_every`` steps and after the final one.

    ``params`` is updated in place. Checkpoints go to
    ``out_dir/step-NNNNNN``; only the ``keep_best`` lowest-perplexity ones
    and the latest survive, and ``out_dir/index.json`` records them.
    """
    state = state or AdamState.zeros(params)
    logger = StepLog(step_log)
    history: list[EvalPoint] = []
    metrics: list[dict] = []
    kept: dict[int, tuple[float, Path]] = {}
    examples_seen = 0
    loss_sum, loss_n = 0.0, 0
    step_seconds = 0.0
    interval_seconds, interval_steps = 0.0, 0
    start = time.perf_counter()
    last_path = None

    for step in range(1, settings.max_steps + 1):
        batch = next(batches)
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, step])
        loss = loss_fn(ad.parameters(params), batch, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"training diverged at step {step}: loss is {value}")
        grads = ad.backward(loss)
        adam_step(params, grads, state, lr_at_step(step, settings.schedule), settings.clip_norm)
        dt = time.perf_counter() - t0
        step_seconds += dt
        interval_seconds += dt
        interval_steps += 1
        examples_seen += batch.size
        loss_sum += value
        loss_n += 1

        if step % settings.eval_every == 0 or step == settings.max_steps:
            ppl = float(evaluate(params))
            point = EvalPoint(
                step=step,
                examples_seen=examples_seen,
                wall_seconds=time.perf_counter() - start,
                train_loss=loss_sum / loss_n,
                dev_perplexity=ppl,
                mean_step_ms=1000.0 * interval_seconds / interval_steps,
            )
            loss_sum, loss_n = 0.0, 0
            interval_seconds, interval_steps = 0.0, 0
            metrics.append({"step": step, "examples_seen": examples_seen, "train_loss": point.train_loss, "dev_perplexity": ppl})
            log.info("%s step %d loss %.4f dev ppl %.3f", mode, step, point.train_loss, ppl)
            if out_dir is not None:
                path = Path(out_dir) / f"step-{step:06d}"
                save_checkpoint(path, make_checkpoint(params, step, list(metrics)))
                point.checkpoint = path.name
                kept[step] = (ppl, path)
                last_path = path
                _prune(kept, settings.keep_best, step)
            history.append(point)
            logger.write(point, mode)

    ranked = sorted(kept.items(), key=lambda kv: (kv[1][0], kv[0]))
    top = [p for _, (_, p) in ranked[: settings.keep_best]]
    if out_dir is not None:
        index = {
            "history": metrics,
            "best": top[0].name if top else None,
            "top_k": [p.name for p in top],
            "last": last_path.name if last_path else None,
        }
        with open(Path(out_dir) / "index.json", "w") as fh:
            fh.write(dump_json(index))
    return TrainResult(
        params=params,
        history=history,
        best=top[0] if top else None,
        top_k=top,
        last=last_path,
        mean_step_ms=1000.0 * step_seconds / max(settings.max_steps, 1),
    )


def _prune(kept: dict[int, tuple[float, Path]], keep_best: int, latest: int) -> None:
    ranked = sorted(kept.items(), key=lambda kv: (kv[1][0], kv[0]))
    survivors = {s for s, _ in ranked[:keep_best]} | {latest}
    for step in list(kept):
        if step not in survivors:
            shutil.rmtree(kept.pop(step)[1], ignore_errors=True)


def read_index(out_dir) -> dict:
    with open(Path(out_dir) / "index.json") as fh:
        return json.load(fh)
