"""``ewcnmt`` command line.

Settings come from built-in defaults, then ``--config`` (YAML), then flags.
Every command that trains writes ``resolved-config`` beside its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_run_config
from .data import read_text
from .errors import ConfigError, EwcNmtError
from .evaluation import bleu
from .experiments import TASK_FILES
from .synthetic import write_task

log = logging.getLogger("ewcnmt")



def _run_options(p: argparse.ArgumentParser, out_dir: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, dest="seed")
    if out_dir:
        p.add_argument("--out-dir", dest="out_dir")


def _path(p, flag: str, dest: str, help: str | None = None, **kw) -> None:
    p.add_argument(flag, dest=dest, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ewcnmt", description="Translation from pretrained language models with EWC fine-tuning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write the bundled synthetic task")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-bpe", help="learn a subword model from one corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--output", required=True)

    p = sub.add_parser("pretrain-lm", help="pretrain a source- or target-side language model")
    _run_options(p)
    p.add_argument("--side", dest="lm.side", choices=["src", "tgt"])
    p.add_argument("--layers", dest="lm.layers", type=int)
    p.add_argument("--max-steps", dest="lm.max_steps", type=int)
    _path(p, "--bpe", "bpe_path", "subword model of that side")
    _path(p, "--mono", "mono_path", "monolingual training corpus")
    _path(p, "--held-out", "held_out_path", "held-out corpus for dev perplexity")

    p = sub.add_parser("estimate-fisher", help="Fisher diagonal of an LM on a held-out corpus")
    p.add_argument("--checkpoint", required=True, help="LM checkpoint or LM output directory")
    p.add_argument("--bpe", required=True)
    p.add_argument("--held-out", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("finetune", help="train a translator, optionally from pretrained LMs")
    _run_options(p)
    p.add_argument("--reg", choices=["none", "ewc", "lm-objective"])
    p.add_argument("--data-dir", help="directory in the synthetic task layout (train.src, dev.src, ...)")
    for side in ("src", "tgt"):
        _path(p, f"--{side}-bpe", f"data.{side}_bpe")
        _path(p, f"--{side}-lm", f"transfer.{side}_lm", f"{side}-side LM checkpoint or output directory")
        p.add_argument(f"--{side}-layers", dest=f"transfer.{side}_layers", type=int)
        p.add_argument(f"--lambda-{side}", dest=f"reg.lambda_{side}", type=float)
        _path(p, f"--mono-{side}", f"data.mono_{side}", "monolingual corpus (lm-objective only)")
    for key in ("train_src", "train_tgt", "dev_src", "dev_tgt"):
        _path(p, "--" + key.replace("_", "-"), f"data.{key}")
    p.add_argument("--fisher", action="append", help="Fisher map directory, repeatable; its side is read from the map")
    p.add_argument("--lm-weight", dest="reg.lm_weight", type=float)
    p.add_argument("--max-steps", dest="train.max_steps", type=int)

    p = sub.add_parser("translate", help="beam-search translation of a text file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src-bpe", required=True)
    p.add_argument("--tgt-bpe", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="defaults to standard output")
    p.add_argument("--beam-size", type=int, default=8)
    p.add_argument("--alpha", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="corpus BLEU of hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smooth", action="store_true", help="add-one smoothing of n-gram precisions")
    p.add_argument("--breakdown", action="store_true", help="print per-order precisions and brevity penalty")

    p = sub.add_parser("average", help="average checkpoints coordinatewise")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("experiment", help="run one of the bundled experiment sweeps")
    p.add_argument("name", choices=["depth-sweep", "convergence", "step-cost"])
    _run_options(p)
    p.add_argument("--data-dir", help="synthetic task directory; generated under the output directory if absent")
    p.add_argument("--lm-dir", help="depth-sweep: directory with depth-<k> LM outputs to reuse")
    p.add_argument("--max-steps", dest="train.max_steps", type=int)
    return parser


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    for key in ("seed", "out_dir"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    data_dir = getattr(args, "data_dir", None)
    if data_dir is not None and args.command != "experiment":
        for key, name in TASK_FILES.items():
            if getattr(cfg.data, key) is None:
                overrides.setdefault(f"data.{key}", str(Path(data_dir) / name))
    return cfg.with_overrides(overrides)


def cmd_make_synthetic(args) -> int:
    paths = write_task(args.out_dir, args.seed)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def cmd_train_bpe(args) -> int:
    model = pipeline.train_subwords(args.input, args.vocab_size, args.output, args.min_frequency)
    print(f"wrote {args.output} ({model.size} symbols, {len(model.merges)} merges)")
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = _config(args)
    side = cfg.lm.side
    cfg = cfg.with_overrides({
        f"data.{side}_bpe": args.bpe_path,
        f"data.mono_{side}": args.mono_path,
        f"data.held_out_{side}": args.held_out_path,
    })
    result = pipeline.pretrain_lm(cfg)
    print(f"best checkpoint {result.best} (dev perplexity {result.best_dev_perplexity:.3f})")
    return 0


def cmd_estimate_fisher(args) -> int:
    path = pipeline.estimate_fisher(args.checkpoint, args.bpe, args.held_out, args.out_dir)
    print(f"wrote {path}")
    return 0


def cmd_finetune(args) -> int:
    overrides = {}
    if args.reg is not None:
        overrides["reg.kind"] = args.reg.replace("-", "_")
    if args.fisher:
        overrides["reg.fisher"] = list(args.fisher)
    cfg = _config(args).with_overrides(overrides)
    result = pipeline.finetune(cfg)
    print(f"best checkpoint {result.best} (dev perplexity {result.best_dev_perplexity:.3f})")
    return 0


def cmd_translate(args) -> int:
    lines = pipeline.translate_file(args.checkpoint, args.src_bpe, args.tgt_bpe, args.input, args.beam_size, args.alpha)
    pipeline.write_output(lines, args.output)
    return 0


def cmd_evaluate(args) -> int:
    result = bleu(read_text(args.hyp), read_text(args.ref), smooth=args.smooth)
    print(result.breakdown() if args.breakdown else str(result))
    return 0


def cmd_average(args) -> int:
    avg = pipeline.average(args.inputs, args.output)
    print(f"wrote {args.output} (average of {len(args.inputs)}, id {avg.id})")
    return 0


def cmd_experiment(args) -> int:
    from . import experiments

    cfg = _config(args)
    if cfg.out_dir is None:
        raise ConfigError("experiments need --out-dir")
    if args.name == "convergence":
        path = experiments.run_convergence(cfg, args.data_dir)
    elif args.name == "step-cost":
        path = experiments.run_step_cost(cfg, args.data_dir)
    else:
        path = experiments.run_depth_sweep(cfg, args.data_dir, args.lm_dir)
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train-bpe": cmd_train_bpe,
    "pretrain-lm": cmd_pretrain_lm,
    "estimate-fisher": cmd_estimate_fisher,
    "finetune": cmd_finetune,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "average": cmd_average,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (EwcNmtError, OSError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ewcnmt {args.command}: error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
