import os

from commands.common import corpus_root, logger, out_path, prepare_dir, write_json
from commands.router import CommandRouter, arg
from evaluation.ablation import evaluate, render_table, run_ablation
from engine.gradcheck import MIN_SAMPLES
from evaluation.gradcheck_suite import run_suite
from evaluation.report import write_report
from models.errors import UsageError
from storage.checkpoint import load_checkpoint
from synth.dataset import load_corpus, load_labeled
from training.trainer import load_model

# Router definition
router = CommandRouter(tags=["evaluation"])


@router.command(
    "eval",
    help="Score a trained model on one split",
    arguments=[
        arg("--corpus", help="Corpus directory (default: <out>/corpus)"),
        arg("--checkpoint", help="Model checkpoint (default: <out>/train/model.g2c)"),
        arg("--split", choices=["train", "test"], default="test"),
        arg("--level1", help="Level-1 (s_vs_noa) model checkpoint for --filter-level1"),
        arg("--filter-level1", action="store_true", help="Score only patches the level-1 model calls abnormal"),
    ],
)
def eval_model(args, config):
    path = args.checkpoint or out_path(args, "train", "model.g2c")
    if not os.path.exists(path):
        raise UsageError(f"no model checkpoint at {path}; run `train` first or pass --checkpoint")
    if args.filter_level1 and not args.level1:
        raise UsageError("--filter-level1 needs --level1 CHECKPOINT")
    model = load_model(load_checkpoint(path), config.model)
    level1 = load_model(load_checkpoint(args.level1), config.model) if args.level1 else None

    root = corpus_root(args)
    patches = load_labeled(load_corpus(root), root, args.split, config.train.task)
    report = evaluate(model, patches, filter_correct_level1=args.filter_level1, level1_model=level1)
    directory = prepare_dir(out_path(args, "eval"), config)
    write_json(os.path.join(directory, f"{args.split}_report.json"), report.model_dump())
    print(report.model_dump_json(indent=2))
    return 0


@router.command(
    "ablate",
    help="Train and evaluate the full model grid over all seeds",
    arguments=[
        arg("--corpus", help="Corpus directory (default: <out>/corpus)"),
        arg("--generators", help="Pretrained generator checkpoint; pretrains once when omitted"),
    ],
)
def ablate(args, config):
    directory = prepare_dir(out_path(args, "ablation"), config)
    grid = run_ablation(config, corpus_root(args), out_dir=directory, generators_checkpoint=args.generators)
    print(render_table(grid), end="")
    return 0


@router.command("report", help="Render tables and plots of a finished ablation")
def report(args, config):
    paths = write_report(out_path(args, "ablation"))
    for name, path in paths.items():
        logger.info(f"{name}: {path}")
    return 0


@router.command(
    "gradcheck",
    help="Finite-difference check of every primitive and the composed graph",
    arguments=[
        arg("--tol", type=float, default=1e-2),
        arg("--samples", type=int, default=MIN_SAMPLES, help="Coordinates per parameter tensor (at least 64)"),
    ],
)
def gradcheck(args, config):
    if args.samples < MIN_SAMPLES:
        raise UsageError(f"--samples must be at least {MIN_SAMPLES}")
    reports = run_suite(seed=config.train.seed, tol=args.tol, samples=args.samples)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_err:.2e}  {'ok' if r.passed else 'FAIL'}")
    prepare_dir(out_path(args))
    write_json(out_path(args, "gradcheck.json"), [r.model_dump() for r in reports])
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"gradient check failed for {failed}")
        return 2
    return 0
