"""Pipeline stages shared by the command line and the experiment harness.

Each stage reads only the artifacts it names and writes under a fixed output
layout: ``checkpoints/``, ``fisher/``, ``logs/steps.csv`` and
``resolved-config``.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, write_resolved
from .data import load_corpus, load_parallel, read_text, write_lines
from .decoding import translate_lines
from .errors import CompatibilityError, ConfigError
from .evaluation import average_checkpoints
from .ewc import EWCTerm, FisherMap, estimate_fisher_diagonal
from .finetune import RegMode, SideTransfer, TransferPlan, train_translator, transfer_init
from .lm import LMTask, train_lm
from .tokenizer import SubwordModel, train_bpe
from .training import TrainResult, read_index
from .transformer import ModelConfig

log = logging.getLogger(__name__)

SIDES = ("src", "tgt")


def layout(out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "root": out,
        "checkpoints": out / "checkpoints",
        "fisher": out / "fisher",
        "steps": out / "logs" / "steps.csv",
    }


def _need(value, what: str):
    if value is None:
        raise ConfigError(f"missing required setting: {what}")
    return value


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint directory or a training output directory (its best checkpoint)."""
    path = Path(path)
    if (path / "manifest").exists():
        return path
    for index_dir in (path / "checkpoints", path):
        if (index_dir / "index.json").exists():
            best = read_index(index_dir)["best"]
            if best is None:
                break
            return index_dir / best
    raise FileNotFoundError(f"no checkpoint found at {path}")


def resolve_fisher(path) -> Path:
    """Accept a Fisher directory or an output directory holding exactly one under ``fisher/``."""
    path = Path(path)
    if (path / "manifest").exists():
        return path
    found = sorted(p for p in (path / "fisher").glob("*") if (p / "manifest").exists())
    if len(found) == 1:
        return found[0]
    raise FileNotFoundError(f"no Fisher map found at {path}")


def train_subwords(input_path, vocab_size: int, output, min_frequency: int = 2) -> SubwordModel:
    model = train_bpe(read_text(input_path), vocab_size, min_frequency)
    model.save(output)
    return model


def lm_model_config(cfg: RunConfig, side: str, layers: int, vocab: int) -> ModelConfig:
    base = {k: v for k, v in cfg.model.__dict__.items() if k not in ("enc_layers", "dec_layers")}
    return ModelConfig(
        enc_layers=layers if side == "src" else 0,
        dec_layers=layers if side == "tgt" else 0,
        src_vocab=vocab if side == "src" else 0,
        tgt_vocab=vocab if side == "tgt" else 0,
        **base,
    )


def pretrain_lm(cfg: RunConfig) -> TrainResult:
    """Train the ``cfg.lm.side`` language model on that side's monolingual corpus."""
    side = cfg.lm.side
    if side not in SIDES:
        raise ConfigError(f"lm.side must be src or tgt, got {side!r}")
    out = layout(_need(cfg.out_dir, "out_dir"))
    bpe_path = _need(getattr(cfg.data, f"{side}_bpe"), f"data.{side}_bpe")
    mono_path = _need(getattr(cfg.data, f"mono_{side}"), f"data.mono_{side}")
    dev_path = _need(getattr(cfg.data, f"held_out_{side}"), f"data.held_out_{side}")
    task = LMTask(side, cfg.lm.layers)
    write_resolved(cfg, out["root"])
    model = SubwordModel.load(bpe_path)
    config = lm_model_config(cfg, side, cfg.lm.layers, model.size)
    settings = replace(cfg.train.build(), max_steps=cfg.lm.max_steps, eval_every=cfg.lm.eval_every)
    result = train_lm(
        task, config, load_corpus(mono_path, model), load_corpus(dev_path, model),
        settings, cfg.seed, out_dir=out["checkpoints"], step_log=out["steps"],
    )
    log.info("best %s LM checkpoint: %s", side, result.best)
    return result


def estimate_fisher(checkpoint, bpe_path, held_out_path, out_dir) -> Path:
    """Write the Fisher diagonal of an LM checkpoint to ``out_dir/fisher/<side>``."""
    ckpt = load_checkpoint(resolve_checkpoint(checkpoint))
    if "lm_task" not in ckpt.extra:
        raise CompatibilityError(f"{checkpoint} is not a language-model checkpoint")
    model = SubwordModel.load(bpe_path)
    fisher = estimate_fisher_diagonal(ckpt, load_corpus(held_out_path, model))
    return fisher.save(layout(out_dir)["fisher"] / fisher.side)


def _transfer_plan(cfg: RunConfig) -> TransferPlan:
    sides = {}
    for side in SIDES:
        path = getattr(cfg.transfer, f"{side}_lm")
        if path is not None:
            sides[side] = SideTransfer(load_checkpoint(resolve_checkpoint(path)), getattr(cfg.transfer, f"{side}_layers"))
    return TransferPlan(seed=cfg.seed, **sides)


def _transfer_depth(side: str, st: SideTransfer) -> int:
    if st.layers is not None:
        return st.layers
    c = st.checkpoint.config
    return c.enc_layers if side == "src" else c.dec_layers


def ewc_mode(anchors, fishers: list[FisherMap], lambdas: dict[str, float]) -> RegMode:
    """EWC mode from per-side anchors and Fisher maps; each map names its own side."""
    terms: dict[str, EWCTerm] = {}
    for fisher in fishers:
        side = fisher.side
        if side not in anchors:
            raise ConfigError(f"a {side}-side Fisher map was given but no {side}-side LM is transferred")
        if side in terms:
            raise ConfigError(f"two Fisher maps given for the {side} side")
        anchor = anchors[side]
        if fisher.source and anchor.source and fisher.source != anchor.source:
            raise CompatibilityError(
                f"{side} Fisher map was estimated on checkpoint {fisher.source}, but {anchor.source} was transferred"
            )
        terms[side] = EWCTerm(anchor, fisher.restrict(anchor.keys()), lambdas[side])
    return RegMode("ewc", ewc_src=terms.get("src"), ewc_tgt=terms.get("tgt"))


def check_finetune_config(cfg: RunConfig) -> None:
    """Validation that needs no artifacts, run before anything is loaded."""
    _need(cfg.out_dir, "out_dir")
    for key in ("src_bpe", "tgt_bpe", "train_src", "train_tgt", "dev_src", "dev_tgt"):
        _need(getattr(cfg.data, key), f"data.{key}")
    has_lm = cfg.transfer.src_lm is not None or cfg.transfer.tgt_lm is not None
    if cfg.reg.kind == "ewc":
        if not cfg.reg.fisher:
            raise ConfigError("reg=ewc needs at least one Fisher map (--fisher)")
        if not has_lm:
            raise ConfigError("reg=ewc needs a transferred LM to anchor to")
    if cfg.reg.kind == "lm_objective":
        if not has_lm:
            raise ConfigError("reg=lm_objective needs at least one pretrained side")
        for side in SIDES:
            if getattr(cfg.transfer, f"{side}_lm") is not None:
                _need(getattr(cfg.data, f"mono_{side}"), f"data.mono_{side}")


def finetune(cfg: RunConfig) -> TrainResult:
    """Initialize from the configured LMs and fine-tune under ``cfg.reg``.

    Monolingual corpora are read only for ``lm_objective``.
    """
    check_finetune_config(cfg)
    out = layout(cfg.out_dir)
    write_resolved(cfg, out["root"])
    d = cfg.data
    src_model, tgt_model = SubwordModel.load(d.src_bpe), SubwordModel.load(d.tgt_bpe)
    config = cfg.model.build(src_model.size, tgt_model.size)
    plan = _transfer_plan(cfg)
    params, anchors, state = transfer_init(config, plan)
    lambdas = {"src": cfg.reg.lambda_src, "tgt": cfg.reg.lambda_tgt}
    mono = None
    if cfg.reg.kind == "ewc":
        fishers = [FisherMap.load(resolve_fisher(p)) for p in cfg.reg.fisher]
        reg = ewc_mode(anchors, fishers, lambdas)
    elif cfg.reg.kind == "lm_objective":
        sides = tuple(sorted(anchors))
        models = {"src": src_model, "tgt": tgt_model}
        mono = {s: load_corpus(getattr(d, f"mono_{s}"), models[s]) for s in sides}
        reg = RegMode("lm_objective", lm_weight=cfg.reg.lm_weight, lm_sides=sides)
    else:
        reg = RegMode()
    train = load_parallel(d.train_src, d.train_tgt, src_model, tgt_model)
    dev = load_parallel(d.dev_src, d.dev_tgt, src_model, tgt_model)
    transfer = {
        side: {"checkpoint": st.checkpoint.id, "layers": _transfer_depth(side, st)}
        for side, st in (("src", plan.src), ("tgt", plan.tgt)) if st is not None
    }
    extra = {"transfer": transfer}
    if cfg.reg.kind == "ewc":
        extra["lambda"] = {s: lambdas[s] for s in SIDES if getattr(reg, f"ewc_{s}") is not None}
    return train_translator(
        config, params, reg, train, dev, cfg.train.build(), cfg.seed,
        out_dir=out["checkpoints"], step_log=out["steps"], mono=mono, state=state, manifest_extra=extra,
    )


def translate_file(checkpoint, src_bpe, tgt_bpe, input_path, beam_size: int = 8, alpha: float = 1.0) -> list[str]:
    ckpt = load_checkpoint(resolve_checkpoint(checkpoint))
    src_model, tgt_model = SubwordModel.load(src_bpe), SubwordModel.load(tgt_bpe)
    if src_model.size != ckpt.config.src_vocab or tgt_model.size != ckpt.config.tgt_vocab:
        raise CompatibilityError(
            f"subword models ({src_model.size}, {tgt_model.size}) do not match the checkpoint vocabularies "
            f"({ckpt.config.src_vocab}, {ckpt.config.tgt_vocab})"
        )
    return translate_lines(ckpt.params, ckpt.config, src_model, tgt_model, read_text(input_path), beam_size, alpha)


def average(inputs, output) -> Checkpoint:
    ckpts = [load_checkpoint(resolve_checkpoint(p)) for p in inputs]
    avg = average_checkpoints(ckpts)
    save_checkpoint(output, avg)
    return avg


def write_output(lines, path=None) -> None:
    if path is None:
        for line in lines:
            print(line)
    else:
        write_lines(path, lines)
