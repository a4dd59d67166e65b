"""
Ablation grid.

Rows are model variants crossed with generator modes:

    ONLY       stain 0 alone (no generators)
    ONLY+      stain 0 alone with attention (optional)
    ONLY-aug   ONLY trained without augmentation
    ONLY-conv7 ONLY with a single 7x7 entry conv as the stem
    +stainK    stain 0 plus one generated stain K
    ALL        stain 0 plus every generated stain
    ALL+       ALL with cross-stain attention

    joint      generators fine-tuned after the freeze epochs
    frozen     generators frozen throughout

Single-branch variants have no generators, so their frozen row reuses the
joint result. Every row/seed writes its checkpoint, metrics.jsonl and
result.json under <out>/<variant>_<mode>/seed<k>/; a finished row is skipped
on re-run when its cache key still matches.
"""
import os
import json
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from middleware import stage_timer
from models.config import RunConfig
from models.errors import AblationError, ConfigError, EvaluationError, G2CError
from models.reports import AblationGrid, MetricReport, RowResult, RowSummary
from nets.generator import as_translator
from storage.cache import cache_key, cached_result
from storage.checkpoint import load_checkpoint, save_checkpoint
from storage.files import atomic_write_text
from synth.dataset import load_corpus, load_labeled, load_reference, oracle_pairs
from training.trainer import build_model, finetune_joint, pretrain_generators, restore_generators, save_model
from evaluation.metrics import metric_report, psnr_fidelity, significance_test

logger = logging.getLogger("g2c-eval")

ALL_STAINS = [1, 2, 3]


@dataclass(frozen=True)
class Variant:
    name: str
    target_stains: tuple
    attention: bool
    # None keeps the run setting
    augment: Optional[bool] = None
    stem: Optional[str] = None


VARIANTS = {
    "ONLY": Variant("ONLY", (), False),
    "ONLY+": Variant("ONLY+", (), True),
    "ONLY-aug": Variant("ONLY-aug", (), False, augment=False),
    "ONLY-conv7": Variant("ONLY-conv7", (), False, stem="conv7"),
    "+stain1": Variant("+stain1", (1,), False),
    "+stain2": Variant("+stain2", (2,), False),
    "+stain3": Variant("+stain3", (3,), False),
    "ALL": Variant("ALL", tuple(ALL_STAINS), False),
    "ALL+": Variant("ALL+", tuple(ALL_STAINS), True),
}


def row_name(variant, mode):
    return f"{variant}/{mode}"


def grid_rows(variants, modes, include_only_attention=False):
    """(variant, mode) pairs in table order"""
    names = list(variants)
    if include_only_attention and "ONLY+" not in names:
        names.insert(names.index("ONLY") + 1 if "ONLY" in names else 0, "ONLY+")
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown grid variants {unknown}; known: {sorted(VARIANTS)}")
    return [(v, m) for v in names for m in modes]


# ---------------------------------------------------------------- evaluation

def predict_split(model, patches, level1_model=None, filter_correct_level1=False):
    """
    Predictions for every patch, plus the mask of patches that are scored

    The level-1 filter keeps only patches the level-1 model calls abnormal
    ("s"); it never changes an individual prediction.
    """
    predictions = model.predict(patches.images)
    keep = np.ones(len(patches), dtype=bool)
    if filter_correct_level1:
        if level1_model is None:
            raise EvaluationError("level-1 filtering requested without a level-1 model")
        if "s" not in level1_model.class_names:
            raise EvaluationError(f"level-1 model classes {level1_model.class_names} have no abnormal class 's'")
        keep = level1_model.predict(patches.images) == level1_model.class_names.index("s")
    return predictions, keep


def evaluate(model, patches, filter_correct_level1=False, level1_model=None, keep=None) -> MetricReport:
    """
    Full-split evaluation

    Args:
        model (G2CModel): Trained model
        patches (PatchSet): Labeled split
        filter_correct_level1 (bool): Score only patches the level-1 model calls abnormal
        level1_model (G2CModel, optional): Required when filtering without a precomputed mask
        keep (np.ndarray, optional): Precomputed boolean mask, overrides the level-1 model
    """
    if keep is None:
        predictions, keep = predict_split(model, patches, level1_model, filter_correct_level1)
    else:
        predictions = model.predict(patches.images)
    return metric_report(patches.labels[keep], predictions[keep], patches.class_names)


def _fidelity(generators, oracles):
    return {
        f"stain{m}": psnr_fidelity(as_translator(generators[m]), *oracles[m])
        for m in sorted(generators) if m in oracles
    }


# ---------------------------------------------------------------- grid

def row_configs(run: RunConfig, variant: Variant, mode, seed):
    """Training and model settings of one row: the run settings with the variant's overrides"""
    cfg = run.train.model_copy(update={
        "seed": seed,
        "target_stains": list(variant.target_stains),
        "attention_enabled": variant.attention,
        "joint": mode == "joint",
    })
    if variant.augment is not None:
        cfg = cfg.model_copy(update={"stage2": cfg.stage2.model_copy(update={"augment": variant.augment})})
    model_cfg = run.model
    if variant.stem is not None:
        model_cfg = model_cfg.model_copy(update={"stem": variant.stem})
    return cfg, model_cfg


@dataclass
class GridInputs:
    run: RunConfig
    train: object
    test: object
    generators: Dict[int, object]
    oracles: Dict[int, tuple]
    level1_keep: Optional[Dict[str, bool]] = None


@cached_result(RowResult)
def _train_row(directory, key, row, variant: Variant, mode, seed, inputs: GridInputs):
    os.makedirs(directory, exist_ok=True)
    metrics_path = os.path.join(directory, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.unlink(metrics_path)

    run = inputs.run
    cfg, model_cfg = row_configs(run, variant, mode, seed)
    generators = {m: inputs.generators[m].copy() for m in variant.target_stains}
    model = build_model(
        model_cfg, len(inputs.train.class_names), seed, cfg.target_stains,
        attention_enabled=variant.attention, generators=generators, class_names=inputs.train.class_names,
    )
    model, _ = finetune_joint(model, inputs.train, cfg, run.loss, test=inputs.test, metrics_path=metrics_path)
    save_model(model, os.path.join(directory, "model.g2c"), meta={"row": row, "seed": seed, "config_hash": key})

    keep = None
    if inputs.level1_keep is not None:
        keep = np.array([inputs.level1_keep.get(r.path, False) for r in inputs.test.records])
    test_report = evaluate(model, inputs.test, keep=keep)
    train_report = evaluate(model, inputs.train)
    predictions = model.predict(inputs.test.images)
    atomic_write_text(os.path.join(directory, "metric_report.json"), json.dumps(
        {"train": train_report.model_dump(), "test": test_report.model_dump()}, indent=2
    ))
    return RowResult(
        row=row,
        seed=seed,
        train=train_report,
        test=test_report,
        predictions=predictions.tolist(),
        labels=inputs.test.labels.tolist(),
        record_paths=[r.path for r in inputs.test.records],
        psnr=_fidelity(model.generators, inputs.oracles),
        config_hash=key,
    )


def _row_key(row, seed, run: RunConfig, corpus_seed, generator_hash, level1):
    return cache_key("row", {
        "row": row,
        "seed": seed,
        "corpus_seed": corpus_seed,
        "model": run.model.model_dump(),
        "loss": run.loss.model_dump(),
        "train": run.train.model_dump(),
        "generators": generator_hash,
        "level1": level1,
    })


def obtain_generators(run: RunConfig, manifest, corpus_root, out_dir, checkpoint_path=None):
    """Loads pretrained generators, or pretrains them once and saves a checkpoint"""
    if checkpoint_path:
        return restore_generators(load_checkpoint(checkpoint_path), ALL_STAINS, run.model), checkpoint_path
    path = os.path.join(out_dir, "pretrain", "generators.g2c")
    key = cache_key("pretrain", {
        "corpus_seed": manifest.corpus_seed,
        "model": run.model.model_dump(),
        "stage1": run.train.stage1.model_dump(),
        "seed": run.train.seed,
    })
    if os.path.exists(path):
        checkpoint = load_checkpoint(path)
        if checkpoint.meta.get("config_hash") == key:
            logger.info(f"Reusing pretrained generators from {path}")
            return restore_generators(checkpoint, ALL_STAINS, run.model), path
    references = {s: load_reference(manifest, corpus_root, s) for s in [0] + ALL_STAINS}
    generators, _ = pretrain_generators(
        references, run.model, run.train.stage1, ALL_STAINS, seed=run.train.seed,
        metrics_path=_fresh(os.path.join(out_dir, "pretrain", "metrics.jsonl")),
    )
    save_checkpoint(
        {f"generator.{m}": g for m, g in generators.items()}, path,
        meta={"config_hash": key, "seed": run.train.seed},
    )
    return generators, path


def _fresh(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if os.path.exists(path):
        os.unlink(path)
    return path


def _level1_masks(run, corpus_root, manifest, out_dir, seed):
    """Trains the level-1 ONLY model (s vs noa) for one seed; path -> called abnormal"""
    train = load_labeled(manifest, corpus_root, "train", "s_vs_noa")
    test = load_labeled(manifest, corpus_root, "test", "s_vs_noa")
    level1_run = run.model_copy(update={"train": run.train.model_copy(update={"task": "s_vs_noa"})})
    inputs = GridInputs(run=level1_run, train=train, test=test, generators={}, oracles={})
    row = "level1/ONLY"
    key = _row_key(row, seed, level1_run, manifest.corpus_seed, None, None)
    result = _train_row(os.path.join(out_dir, "level1", f"seed{seed}"), key, row, VARIANTS["ONLY"], "joint", seed, inputs)
    abnormal = train.class_names.index("s")
    return {path: pred == abnormal for path, pred in zip(result.record_paths, result.predictions)}


def summarize(grid: AblationGrid):
    summary = []
    for row in grid.rows():
        results = grid.for_row(row)
        test = np.array([r.test.balanced_accuracy for r in results])
        train = np.array([r.train.balanced_accuracy for r in results])
        summary.append(RowSummary(
            row=row,
            n_seeds=len(results),
            test_mean=float(test.mean()),
            test_std=float(test.std(ddof=1)) if len(test) > 1 else 0.0,
            train_mean=float(train.mean()),
            gap_mean=float(np.mean([r.gap for r in results])),
        ))
    return summary


def pairwise_significance(grid: AblationGrid, row_a, row_b):
    """McNemar p-value of row_a vs row_b for every seed both rows ran"""
    b_by_seed = {r.seed: r for r in grid.for_row(row_b)}
    out = {}
    for a in grid.for_row(row_a):
        b = b_by_seed.get(a.seed)
        if b is not None:
            out[f"{row_a} vs {row_b} seed {a.seed}"] = significance_test(a.predictions, b.predictions, a.labels)
    return out


def render_table(grid: AblationGrid):
    """Aligned plain-text table: balanced accuracy mean +- std, train mean, gap"""
    header = f"{'row':<20} {'test bacc %':>16} {'train bacc %':>13} {'gap':>7}"
    lines = [header, "-" * len(header)]
    for s in grid.summary:
        lines.append(
            f"{s.row:<20} {100 * s.test_mean:>9.2f} +- {100 * s.test_std:<4.2f} "
            f"{100 * s.train_mean:>13.2f} {s.gap_mean:>7.2f}"
        )
    if grid.significance:
        lines.append("")
        lines.extend(f"{name}: p = {p:.4g}" for name, p in sorted(grid.significance.items()))
    if grid.pretrain_psnr:
        lines.append("")
        lines.extend(f"pretrained {name}: PSNR {value:.2f} dB" for name, value in sorted(grid.pretrain_psnr.items()))
    return "\n".join(lines) + "\n"


def run_ablation(run: RunConfig, corpus_root, out_dir=None, generators_checkpoint=None) -> AblationGrid:
    """
    Trains and evaluates every grid row for every seed

    Args:
        run (RunConfig): Model, loss, training and grid settings
        corpus_root (str): Directory holding manifest.jsonl
        out_dir (str, optional): Overrides run.grid.out_dir
        generators_checkpoint (str, optional): Pretrained generators; overrides run.grid.pretrained_generators

    Returns:
        AblationGrid: Per-row results, summary, significance and PSNR
    """
    grid_cfg = run.grid
    out_dir = out_dir or grid_cfg.out_dir
    if len(grid_cfg.seeds) < 3:
        logger.warning(f"Only {len(grid_cfg.seeds)} seeds; comparative claims need at least 3")
    if grid_cfg.level1_filter and run.train.task != "gs_vs_ss":
        raise ConfigError("the level-1 filter applies to the gs_vs_ss task only")
    rows = grid_rows(grid_cfg.variants, grid_cfg.modes, grid_cfg.include_only_attention)

    manifest = load_corpus(corpus_root)
    task = run.train.task
    train = load_labeled(manifest, corpus_root, "train", task)
    test = load_labeled(manifest, corpus_root, "test", task)
    needs_generators = any(VARIANTS[v].target_stains for v, _ in rows)

    generators, oracles, pretrain_psnr, generator_hash = {}, {}, {}, None
    if needs_generators:
        generators, _ = obtain_generators(
            run, manifest, corpus_root, out_dir, generators_checkpoint or grid_cfg.pretrained_generators
        )
        oracles = {m: oracle_pairs(manifest, corpus_root, m) for m in ALL_STAINS}
        pretrain_psnr = _fidelity(generators, oracles)
        generator_hash = cache_key("generators", {str(m): g.digest() for m, g in sorted(generators.items())})
        logger.info(f"Pretrained generator PSNR: {pretrain_psnr}")

    grid = AblationGrid(seeds=list(grid_cfg.seeds), pretrain_psnr=pretrain_psnr)
    for seed in grid_cfg.seeds:
        level1_keep = None
        if grid_cfg.level1_filter:
            level1_keep = _level1_masks(run, corpus_root, manifest, out_dir, seed)
        inputs = GridInputs(run=run, train=train, test=test, generators=generators, oracles=oracles,
                            level1_keep=level1_keep)
        single_branch = {}
        for variant_name, mode in rows:
            variant = VARIANTS[variant_name]
            row = row_name(variant_name, mode)
            if not variant.target_stains and variant_name in single_branch:
                reused = single_branch[variant_name].model_copy(update={"row": row})
                grid.results.append(reused)
                continue
            directory = os.path.join(out_dir, f"{variant_name}_{mode}", f"seed{seed}")
            key = _row_key(row_name(variant_name, "joint") if not variant.target_stains else row, seed, run,
                           manifest.corpus_seed, generator_hash if variant.target_stains else None,
                           level1_keep is not None)
            try:
                with stage_timer(f"row {row} seed {seed}"):
                    result = _train_row(directory, key, row, variant, mode, seed, inputs)
            except G2CError as error:
                raise AblationError(row, error) from error
            result = result.model_copy(update={"row": row})
            if not variant.target_stains:
                single_branch[variant_name] = result
            grid.results.append(result)
            logger.info(f"{row} seed {seed}: test bacc {result.test.balanced_accuracy:.4f} gap {result.gap:.2f}")

    grid.summary = summarize(grid)
    if "ALL" in grid_cfg.variants and "ONLY" in grid_cfg.variants:
        mode = grid_cfg.modes[0]
        grid.significance = pairwise_significance(grid, row_name("ALL", mode), row_name("ONLY", mode))

    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "summary.txt"), render_table(grid))
    atomic_write_text(os.path.join(out_dir, "summary.json"), grid.model_dump_json(indent=2))
    atomic_write_text(os.path.join(out_dir, "resolved_config.json"), run.model_dump_json(indent=2))
    logger.info(f"Ablation summary written to {out_dir}")
    return grid
