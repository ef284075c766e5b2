import argparse
import functools
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch

from App.core.config import TrainConfig, load_config, settings
from App.core.errors import MarMaerError, UsageError
from App.services.checkpoint import load_checkpoint, save_checkpoint
from App.services.evaluation import (
    assign_cluster,
    draw_latents,
    embedding_snapshot,
    eval_alignment,
    eval_diversity,
    run_ablation,
)
from App.services.gradcheck import TINY_CONFIG, grad_check
from App.services.reports import emit_report, write_json
from App.services.synthdata import (
    generate_ambiguous_benchmark,
    generate_dataset,
    generate_records,
    load_records,
    make_prompt,
    oracle_score,
    preference_score,
)
from App.services.trainer import make_batch, train
from App.services.vocabulary import vocabulary

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports bad usage as a UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def Option(*flags: str, **kwargs) -> tuple:
    """Declare a subcommand option, argparse style."""
    return flags, kwargs


@dataclass
class Command:
    name: str
    summary: str
    handler: Callable[[argparse.Namespace], Optional[int]]
    options: List[tuple] = field(default_factory=list)


class CommandRouter:
    """Collects subcommands registered with @router.command and builds the parser."""

    def __init__(self, prog: str, description: str):
        self.prog = prog
        self.description = description
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, summary: str, options: Sequence[tuple] = ()):
        def decorator(func):
            @functools.wraps(func)
            def wrapper(args: argparse.Namespace) -> int:
                result = func(args)
                return 0 if result is None else int(result)
            self.commands[name] = Command(name, summary, wrapper, list(options))
            return wrapper
        return decorator

    def build_parser(self) -> argparse.ArgumentParser:
        parser = _Parser(prog=self.prog, description=self.description)
        sub = parser.add_subparsers(dest="command", metavar="<command>", required=True)
        for command in self.commands.values():
            p = sub.add_parser(command.name, help=command.summary, description=command.summary)
            p.add_argument("--config", type=Path, default=None, help="JSON file with TrainConfig fields")
            p.add_argument("--seed", type=int, default=None, help="seed (overrides the config's seed)")
            p.add_argument("--out", type=Path, default=None, help="output path")
            for flags, kwargs in command.options:
                p.add_argument(*flags, **kwargs)
            p.set_defaults(handler=command.handler)
        return parser


router = CommandRouter(prog=settings.APP_TITLE, description=settings.APP_DESCRIPTION)


def _config(args: argparse.Namespace, **overrides) -> TrainConfig:
    return load_config(args.config, seed=args.seed, **overrides)


def _out(args: argparse.Namespace, default: str) -> Path:
    return args.out if args.out is not None else settings.OUTPUT_DIR / default


def _prompt_tokens(args: argparse.Namespace) -> List[int]:
    if args.tokens:
        tokens = [int(t) for t in args.tokens.replace(",", " ").split()]
        make_prompt(tokens)
        return tokens
    if args.prompt:
        return vocabulary.parse_text(args.prompt)
    raise UsageError("sample needs --prompt or --tokens")


@router.command("synth", summary="Generate a synthetic training dataset", options=[
    Option("--n", type=int, default=1000, help="number of records"),
    Option("--ambiguous-fraction", type=float, default=0.5, help="fraction of class-word prompts"),
])
def synth(args: argparse.Namespace):
    if args.n < 1 or not 0.0 <= args.ambiguous_fraction <= 1.0:
        raise UsageError("--n must be >= 1 and --ambiguous-fraction must lie in [0, 1]")
    config = _config(args)
    path = generate_dataset(args.n, config.seed, args.ambiguous_fraction, _out(args, "dataset.jsonl"))
    print(path)


@router.command("bench", summary="Generate the ambiguous-prompt benchmark", options=[
    Option("--n", type=int, default=200, help="number of prompts"),
])
def bench(args: argparse.Namespace):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    config = _config(args)
    print(generate_ambiguous_benchmark(args.n, config.seed, _out(args, "benchmark.jsonl")))


@router.command("train", summary="Train a model and write a checkpoint", options=[
    Option("--data", type=Path, required=True, help="dataset file"),
    Option("--steps", type=int, default=None, help="override the config's step count"),
    Option("--metrics", type=Path, default=None, help="JSONL metrics log (default: <out>.metrics.jsonl)"),
    Option("--resume", type=Path, default=None, help="continue from this checkpoint"),
])
def train_command(args: argparse.Namespace):
    config = _config(args, steps=args.steps)
    out = _out(args, "checkpoint.bin")
    metrics = args.metrics or out.with_suffix(".metrics.jsonl")
    trainer = load_checkpoint(args.resume, config) if args.resume else None
    result = train(config, args.data, metrics_path=metrics, trainer=trainer)
    save_checkpoint(result.trainer, out)
    print(out)


@router.command("sample", summary="Decode images for one prompt", options=[
    Option("--checkpoint", type=Path, required=True, help="checkpoint file"),
    Option("--prompt", type=str, default=None, help='prompt text, e.g. "warm stripes"'),
    Option("--tokens", type=str, default=None, help='prompt token ids, e.g. "1 10 14 0"'),
    Option("--samples", type=int, default=0, help="latents to draw; 0 decodes the mean mode only"),
    Option("--temperature", type=float, default=0.0, help="0 for argmax decoding"),
])
def sample(args: argparse.Namespace):
    if args.samples < 0:
        raise UsageError("--samples must be >= 0")
    seed = _config(args).seed
    tokens = _prompt_tokens(args)
    model = load_checkpoint(args.checkpoint).model.eval()
    spec = make_prompt(tokens)
    prompts = torch.tensor([tokens], dtype=torch.long)
    with torch.no_grad():
        if args.samples:
            c = draw_latents(model, prompts, args.samples, seed)
            prompts = prompts.repeat(args.samples, 1)
        else:
            c = model.mean_latent(prompts)
    x_lr, x_hr = model.sample(prompts, c, args.temperature, seed)
    decodes = [
        {"lr": lr, "hr": hr, "score": oracle_score(hr, spec), "preference": preference_score(hr),
         "cluster": assign_cluster(hr, spec)}
        for lr, hr in zip(x_lr.tolist(), x_hr.tolist())
    ]
    payload = {"prompt": tokens, "text": vocabulary.describe(tokens), "mean_mode": not args.samples,
               "temperature": args.temperature, "seed": seed, "decodes": decodes}
    print(write_json(payload, _out(args, "samples.json")))


@router.command("eval-align", summary="Score mean-mode decodes with the alignment oracle", options=[
    Option("--checkpoint", type=Path, required=True, help="checkpoint file"),
    Option("--data", type=Path, required=True, help="dataset file"),
    Option("--temperature", type=float, default=0.0, help="0 for argmax decoding"),
    Option("--scatter", action="store_true", help="also write an SVG of the MAER embedding of one batch"),
])
def eval_align(args: argparse.Namespace):
    seed = _config(args).seed
    model = load_checkpoint(args.checkpoint).model
    records = load_records(args.data)[1]
    report = eval_alignment(model, records, temperature=args.temperature, seed=seed)
    scatter = None
    if args.scatter:
        if len(records) < 2:
            logger.warning("Skipping the scatter: the MAER embedding needs at least 2 records, got %d", len(records))
        else:
            scatter = embedding_snapshot(model, records[:model.config.batch_size])
    emit_report(report, _out(args, "alignment"), scatter=scatter)
    print(f"mean alignment {report.mean_score:.4f} (chance {report.chance_score:.4f}), "
          f"mean preference {report.mean_preference:.4f}")


@router.command("eval-diversity", summary="Diversity and plausibility on the ambiguous benchmark", options=[
    Option("--checkpoint", type=Path, required=True, help="checkpoint file"),
    Option("--bench", type=Path, required=True, help="benchmark file"),
    Option("--k", type=int, default=5, help="latents per prompt"),
])
def eval_diversity_command(args: argparse.Namespace):
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    report = eval_diversity(args.checkpoint, args.bench, k=args.k, seed=_config(args).seed)
    emit_report(report, _out(args, "diversity"))
    print(f"mean distinct clusters {report.mean_distinct_clusters:.3f} "
          f"(mean mode {report.mean_mode_distinct_clusters:.3f}), coverage {report.mean_coverage:.3f}")


@router.command("ablate", summary="Train and evaluate the four variants over several seeds", options=[
    Option("--data", type=Path, required=True, help="dataset file"),
    Option("--bench", type=Path, required=True, help="benchmark file"),
    Option("--heldout", type=Path, default=None, help="held-out dataset (default: generated per seed)"),
    Option("--n-seeds", type=int, default=5, help="seeds seed, seed+1, ..."),
    Option("--k", type=int, default=5, help="latents per benchmark prompt"),
])
def ablate(args: argparse.Namespace):
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    config = _config(args)
    seeds = list(range(config.seed, config.seed + args.n_seeds))
    result = run_ablation(config, args.data, args.bench, seeds, heldout=args.heldout, k=args.k)
    emit_report(result, _out(args, "ablation"))
    for row in result.rows:
        if row.failed:
            print(f"{row.variant:<11} failed (seeds {', '.join(map(str, sorted(row.failed_seeds)))})")
            continue
        print(f"{row.variant:<11} alignment {row.alignment_mean:.4f} ± {row.alignment_std:.4f} "
              f"seeds {row.seed_count}")


@router.command("gradcheck", summary="Check autograd gradients against finite differences", options=[
    Option("--tolerance", type=float, default=1e-4, help="max relative error for L_AR, L_MAER and L_total"),
    Option("--entries", type=int, default=8, help="entries differenced per parameter"),
])
def gradcheck(args: argparse.Namespace) -> int:
    if args.config is None:
        config = TrainConfig(**{**TINY_CONFIG, "use_maer": True, "use_ambiguity": True,
                                **({"seed": args.seed} if args.seed is not None else {})})
    else:
        config = _config(args)
    batch = make_batch(generate_records(config.batch_size, config.seed, 0.5))
    report = grad_check(config, batch, tolerance=args.tolerance, max_entries=args.entries, seed=config.seed)
    emit_report(report, _out(args, "gradcheck"))
    failed = [e for e in report.entries if not e.passed]
    for e in failed:
        print(f"FAIL {e.loss} {e.parameter}: {e.max_rel_error:.3e} > {e.tolerance:.1e}", file=sys.stderr)
    print("gradcheck passed" if report.passed else f"gradcheck failed ({len(failed)} entries)")
    return 0 if report.passed else 2


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and map errors to exit codes:
    0 on success, 1 for validation errors, 2 for runtime errors.
    """
    parser = router.build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except MarMaerError as e:
        print(e.detail, file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
