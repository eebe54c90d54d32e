"""Desk-scale experiment sweeps over the synthetic task.

``experiment_depth_sweep`` anchors the encoder to source LMs of several
depths; ``experiment_convergence`` compares the three regularization modes
under one training-example budget; ``experiment_step_cost`` times them
against each other. All write plain CSV.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from pathlib import Path
from typing import Iterable, Mapping

from . import pipeline
from .config import RunConfig
from .data import read_text
from .evaluation import bleu
from .synthetic import write_task
from .tokenizer import normalize

log = logging.getLogger(__name__)

CONVERGENCE_FIELDS = ["mode", "step", "examples_seen", "wall_seconds", "dev_perplexity", "mean_step_ms"]
STEP_COST_FIELDS = ["round", "mode", "steps", "examples_seen", "mean_step_ms"]
SWEEP_FIELDS = ["depth", "best_dev_perplexity", "bleu", "wall_seconds"]
MODES = ("none", "ewc", "lm_objective")
TASK_FILES = {
    "train_src": "train.src", "train_tgt": "train.tgt",
    "dev_src": "dev.src", "dev_tgt": "dev.tgt",
    "test_src": "test.src", "test_tgt": "test.tgt",
    "mono_src": "mono.src", "mono_tgt": "mono.tgt",
    "held_out_src": "heldout.src", "held_out_tgt": "heldout.tgt",
}
TASK_SEED = 0


def _write_csv(path: Path, fields: list[str], rows: Iterable[Mapping]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})
    return path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def prepare_task(cfg: RunConfig, data_dir=None) -> RunConfig:
    """Fill ``cfg.data`` with the synthetic task files and subword models,
    generating whatever is missing under ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data_dir is None:
        data_dir = out / "data"
        if not (data_dir / "train.src").exists():
            write_task(data_dir, TASK_SEED)
    data_dir = Path(data_dir)
    overrides = {f"data.{k}": str(data_dir / name) for k, name in TASK_FILES.items() if getattr(cfg.data, k) is None}
    cfg = cfg.with_overrides(overrides)
    for side in pipeline.SIDES:
        if getattr(cfg.data, f"{side}_bpe") is None:
            path = out / f"bpe.{side}"
            if not path.exists():
                pipeline.train_subwords(getattr(cfg.data, f"mono_{side}"), cfg.bpe.vocab_size, path, cfg.bpe.min_frequency)
            cfg = cfg.with_overrides({f"data.{side}_bpe": str(path)})
    return cfg


def pretrain_with_fisher(cfg: RunConfig, side: str, layers: int, out_dir: Path) -> tuple[Path, Path]:
    """Pretrain an LM and estimate its Fisher map unless both already exist."""
    fisher = out_dir / "fisher" / side
    if not (out_dir / "checkpoints" / "index.json").exists():
        lm_cfg = cfg.with_overrides({"lm.side": side, "lm.layers": layers, "out_dir": str(out_dir)})
        pipeline.pretrain_lm(lm_cfg)
    if not (fisher / "manifest").exists():
        pipeline.estimate_fisher(
            out_dir, getattr(cfg.data, f"{side}_bpe"), getattr(cfg.data, f"held_out_{side}"), out_dir
        )
    return pipeline.resolve_checkpoint(out_dir), fisher


def experiment_convergence(cfg: RunConfig, lm_checkpoint, fisher, out_dir) -> list[dict]:
    """Decoder-side transfer fine-tuned under each mode with the same seed and
    the same batches; one CSV row per evaluation point."""
    out_dir = Path(out_dir)
    rows = []
    for mode in MODES:
        overrides = {"reg.kind": mode, "transfer.tgt_lm": str(lm_checkpoint), "out_dir": str(out_dir / mode)}
        if mode == "ewc":
            overrides["reg.fisher"] = [str(fisher)]
        result = pipeline.finetune(cfg.with_overrides(overrides))
        for p in result.history:
            rows.append({
                "mode": mode, "step": p.step, "examples_seen": p.examples_seen,
                "wall_seconds": p.wall_seconds, "dev_perplexity": p.dev_perplexity, "mean_step_ms": p.mean_step_ms,
            })
        log.info("%s: best dev perplexity %.3f, %.2f ms/step", mode, result.best_dev_perplexity, result.mean_step_ms)
    _write_csv(out_dir / "convergence.csv", CONVERGENCE_FIELDS, rows)
    return rows


def experiment_step_cost(cfg: RunConfig, lm_checkpoint, fisher, out_dir) -> list[dict]:
    """Short identical runs of every mode, interleaved round-robin with the
    order rotated each round, so drift in machine speed lands on all modes
    alike. One row per run."""
    out_dir = Path(out_dir)
    rounds, steps = cfg.experiment.cost_rounds, cfg.experiment.cost_steps
    rows = []
    for r in range(rounds):
        order = MODES[r % len(MODES):] + MODES[:r % len(MODES)]
        for mode in order:
            overrides = {
                "reg.kind": mode, "transfer.tgt_lm": str(lm_checkpoint), "out_dir": str(out_dir / f"round-{r}" / mode),
                "train.max_steps": steps, "train.eval_every": steps,
            }
            if mode == "ewc":
                overrides["reg.fisher"] = [str(fisher)]
            result = pipeline.finetune(cfg.with_overrides(overrides))
            rows.append({
                "round": r, "mode": mode, "steps": steps,
                "examples_seen": result.history[-1].examples_seen, "mean_step_ms": result.mean_step_ms,
            })
    _write_csv(out_dir / "step_cost.csv", STEP_COST_FIELDS, rows)
    return rows


def _tgt_lm(cfg: RunConfig, out: Path) -> tuple[Path, Path]:
    if cfg.transfer.tgt_lm is not None and cfg.reg.fisher:
        return Path(cfg.transfer.tgt_lm), Path(cfg.reg.fisher[0])
    return pretrain_with_fisher(cfg, "tgt", cfg.lm.layers, out / "lm-tgt")


def run_step_cost(cfg: RunConfig, data_dir=None) -> Path:
    cfg = prepare_task(cfg, data_dir)
    out = Path(cfg.out_dir)
    experiment_step_cost(cfg, *_tgt_lm(cfg, out), out)
    return out / "step_cost.csv"


def run_convergence(cfg: RunConfig, data_dir=None) -> Path:
    cfg = prepare_task(cfg, data_dir)
    out = Path(cfg.out_dir)
    experiment_convergence(cfg, *_tgt_lm(cfg, out), out)
    return out / "convergence.csv"


def _test_bleu(cfg: RunConfig, checkpoint) -> float:
    d = cfg.data
    hyps = pipeline.translate_file(checkpoint, d.src_bpe, d.tgt_bpe, d.test_src, cfg.decode.beam_size, cfg.decode.alpha)
    refs = [normalize(line) for line in read_text(d.test_tgt)]
    return bleu(hyps, refs).score


def _sweep_row(cfg: RunConfig, depth: int, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    result = pipeline.finetune(cfg.with_overrides({"out_dir": str(out_dir)}))
    score = _test_bleu(cfg, result.best)
    return {
        "depth": depth,
        "best_dev_perplexity": result.best_dev_perplexity,
        "bleu": score,
        "wall_seconds": time.perf_counter() - t0,
    }


def experiment_depth_sweep(
    cfg: RunConfig,
    lms: Mapping[int, tuple[Path, Path] | None],
    out_dir,
    depths: Iterable[int] | None = None,
) -> list[dict]:
    """One row per LM depth (encoder-side EWC) plus a depth-0 row without
    pretraining. ``lms`` maps depth to ``(checkpoint, fisher)``; a missing
    depth yields a warning and a row of NaNs."""
    out_dir = Path(out_dir)
    depths = list(depths if depths is not None else cfg.experiment.depths)
    base = cfg.with_overrides({
        "model.enc_layers": cfg.experiment.sweep_enc_layers,
        "model.dec_layers": cfg.experiment.sweep_dec_layers,
    })
    rows = [_sweep_row(base.with_overrides({"reg.kind": "none"}), 0, out_dir / "baseline")]
    for depth in depths:
        found = lms.get(depth)
        if found is None:
            warnings.warn(f"no pretrained source LM of depth {depth}; writing a placeholder row", stacklevel=2)
            rows.append({"depth": depth, "best_dev_perplexity": math.nan, "bleu": math.nan, "wall_seconds": math.nan})
            continue
        lm, fisher = found
        run = base.with_overrides({
            "reg.kind": "ewc",
            "transfer.src_lm": str(lm),
            "transfer.src_layers": depth,
            "reg.fisher": [str(fisher)],
            "reg.lambda_src": cfg.experiment.sweep_lambda,
        })
        rows.append(_sweep_row(run, depth, out_dir / f"depth-{depth}"))
    _write_csv(out_dir / "depth_sweep.csv", SWEEP_FIELDS, rows)
    return rows


def run_depth_sweep(cfg: RunConfig, data_dir=None, lm_dir=None) -> Path:
    """End to end: subword models, source LMs of each depth with their Fisher
    maps (or the ones found under ``lm_dir/depth-<k>``), then the sweep."""
    cfg = prepare_task(cfg, data_dir)
    out = Path(cfg.out_dir)
    lms: dict[int, tuple[Path, Path] | None] = {}
    for depth in cfg.experiment.depths:
        if lm_dir is None:
            lms[depth] = pretrain_with_fisher(cfg, "src", depth, out / "lm-src" / f"depth-{depth}")
            continue
        path = Path(lm_dir) / f"depth-{depth}"
        try:
            lms[depth] = (pipeline.resolve_checkpoint(path), pipeline.resolve_fisher(path))
        except FileNotFoundError:
            lms[depth] = None
    experiment_depth_sweep(cfg, lms, out)
    return out / "depth_sweep.csv"
