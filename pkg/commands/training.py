import os

from commands.common import corpus_root, fresh_file, logger, out_path, prepare_dir, write_json
from commands.router import CommandRouter, arg
from evaluation.ablation import evaluate
from evaluation.metrics import psnr_fidelity
from models.errors import UsageError
from nets.generator import as_translator
from storage.cache import config_hash
from storage.checkpoint import load_checkpoint, save_checkpoint
from synth.dataset import load_corpus, load_labeled, load_reference, oracle_pairs
from training.trainer import (
    build_model,
    finetune_joint,
    pretrain_generators,
    restore_generators,
    save_model,
    transfer_finetune,
)

# Router definition
router = CommandRouter(tags=["training"])

CORPUS_ARG = arg("--corpus", help="Corpus directory (default: <out>/corpus)")


def _save_model(model, directory, config, train, test):
    save_model(model, os.path.join(directory, "model.g2c"), meta={
        "seed": config.train.seed,
        "task": config.train.task,
        "epoch": config.train.stage2.epochs,
        "config_hash": config_hash(config),
    })
    reports = {"train": evaluate(model, train).model_dump(), "test": evaluate(model, test).model_dump()}
    write_json(os.path.join(directory, "metric_report.json"), reports)
    logger.info(f"test balanced accuracy {reports['test']['balanced_accuracy']:.4f}")


@router.command("pretrain", help="Stage 1: cycle-consistent generator pretraining", arguments=[CORPUS_ARG])
def pretrain(args, config):
    root = corpus_root(args)
    manifest = load_corpus(root)
    stains = config.train.target_stains
    references = {s: load_reference(manifest, root, s) for s in [0] + list(stains)}
    directory = prepare_dir(out_path(args, "pretrain"), config)

    generators, _ = pretrain_generators(
        references, config.model, config.train.stage1, stains, seed=config.train.seed,
        metrics_path=fresh_file(os.path.join(directory, "metrics.jsonl")),
    )
    save_checkpoint(
        {f"generator.{m}": g for m, g in generators.items()},
        os.path.join(directory, "generators.g2c"),
        meta={"seed": config.train.seed, "corpus_seed": manifest.corpus_seed, "config_hash": config_hash(config)},
    )
    fidelity = {
        f"stain{m}": psnr_fidelity(as_translator(g), *oracle_pairs(manifest, root, m))
        for m, g in generators.items()
    }
    write_json(os.path.join(directory, "psnr.json"), fidelity)
    return 0


@router.command(
    "train",
    help="Stage 2: joint fine-tuning of generators and classifier",
    arguments=[
        CORPUS_ARG,
        arg("--generators", help="Pretrained generator checkpoint (default: <out>/pretrain/generators.g2c)"),
        arg("--random-generators", action="store_true", help="Use untrained generators (ablation only)"),
    ],
)
def train(args, config):
    cfg = config.train
    generators = None
    if cfg.M > 0 and not args.random_generators:
        path = args.generators or out_path(args, "pretrain", "generators.g2c")
        if not os.path.exists(path):
            raise UsageError(
                f"no pretrained generators at {path}; run `pretrain` first, pass --generators, "
                f"or pass --random-generators"
            )
        generators = restore_generators(load_checkpoint(path), cfg.target_stains, config.model)

    root = corpus_root(args)
    manifest = load_corpus(root)
    train_set = load_labeled(manifest, root, "train", cfg.task)
    test_set = load_labeled(manifest, root, "test", cfg.task)
    directory = prepare_dir(out_path(args, "train"), config)

    model = build_model(
        config.model, len(train_set.class_names), cfg.seed, cfg.target_stains,
        attention_enabled=cfg.attention_enabled, generators=generators, class_names=train_set.class_names,
    )
    model, _ = finetune_joint(
        model, train_set, cfg, config.loss, test=test_set,
        metrics_path=fresh_file(os.path.join(directory, "metrics.jsonl")),
    )
    _save_model(model, directory, config, train_set, test_set)
    return 0


@router.command(
    "transfer",
    help="Fine-tune generators from another run with a fresh classifier on a new task",
    arguments=[
        CORPUS_ARG,
        arg("--generators", required=True, help="Generator checkpoint from the source run"),
    ],
)
def transfer(args, config):
    checkpoint = load_checkpoint(args.generators)
    cfg = config.train
    root = corpus_root(args)
    manifest = load_corpus(root)
    train_set = load_labeled(manifest, root, "train", cfg.task)
    test_set = load_labeled(manifest, root, "test", cfg.task)
    directory = prepare_dir(out_path(args, "transfer"), config)

    model, _ = transfer_finetune(
        checkpoint, train_set, cfg, config.model, config.loss, test=test_set,
        metrics_path=fresh_file(os.path.join(directory, "metrics.jsonl")),
    )
    _save_model(model, directory, config, train_set, test_set)
    return 0
