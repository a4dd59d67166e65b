import os
import json
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from models.errors import EvaluationError  # noqa: E402
from models.reports import AblationGrid, EpochRecord  # noqa: E402
from storage.files import atomic_write_text  # noqa: E402
from evaluation.ablation import render_table  # noqa: E402

logger = logging.getLogger("g2c-eval")


def read_epoch_log(path):
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                if line.strip():
                    records.append(EpochRecord.model_validate_json(line))
    except OSError as error:
        raise EvaluationError(f"cannot read epoch log {path}: {error}") from error
    except ValidationError as error:
        raise EvaluationError(f"{path} line {number}: malformed epoch record: {error}") from error
    return records


def load_grid(out_dir) -> AblationGrid:
    path = os.path.join(out_dir, "summary.json")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return AblationGrid.model_validate_json(f.read())
    except OSError as error:
        raise EvaluationError(f"no ablation summary at {path}: {error}") from error
    except ValidationError as error:
        raise EvaluationError(f"malformed ablation summary {path}: {error}") from error


def plot_training_curves(out_dir, path):
    """Test balanced accuracy per epoch, one line per row directory and seed"""
    fig, ax = plt.subplots(figsize=(8, 5))
    plotted = 0
    for row_dir in sorted(os.listdir(out_dir)):
        full = os.path.join(out_dir, row_dir)
        if not os.path.isdir(full) or row_dir in ("pretrain", "level1"):
            continue
        for seed_dir in sorted(os.listdir(full)):
            log = os.path.join(full, seed_dir, "metrics.jsonl")
            if not os.path.exists(log):
                continue
            records = [r for r in read_epoch_log(log) if r.test_balanced_accuracy is not None]
            if records:
                ax.plot([r.epoch for r in records], [r.test_balanced_accuracy for r in records],
                        label=f"{row_dir} {seed_dir}", linewidth=1)
                plotted += 1
    ax.set_xlabel("epoch")
    ax.set_ylabel("test balanced accuracy")
    if plotted and plotted <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return plotted


def plot_gap_bars(grid: AblationGrid, path):
    """Train-test gap per row, mean over seeds"""
    fig, ax = plt.subplots(figsize=(8, 4))
    rows = [s.row for s in grid.summary]
    ax.bar(range(len(rows)), [s.gap_mean for s in grid.summary], color="#4a7ab5")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(rows, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("train - test balanced accuracy (points)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(out_dir, report_dir=None):
    """
    Renders the table and plots of a finished ablation directory

    Returns:
        dict: Paths of the written files
    """
    report_dir = report_dir or os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    grid = load_grid(out_dir)
    paths = {
        "table": os.path.join(report_dir, "table.txt"),
        "curves": os.path.join(report_dir, "training_curves.png"),
        "gaps": os.path.join(report_dir, "gap_bars.png"),
        "psnr": os.path.join(report_dir, "psnr.json"),
    }
    atomic_write_text(paths["table"], render_table(grid))
    plot_training_curves(out_dir, paths["curves"])
    plot_gap_bars(grid, paths["gaps"])
    # pretrained vs fine-tuned fidelity, reported only
    finetuned = {}
    for result in grid.results:
        for stain, value in result.psnr.items():
            finetuned.setdefault(result.row, {}).setdefault(stain, []).append(value)
    psnr = {
        "pretrained": grid.pretrain_psnr,
        "finetuned": {row: {s: sum(v) / len(v) for s, v in stains.items()} for row, stains in finetuned.items()},
    }
    atomic_write_text(paths["psnr"], json.dumps(psnr, indent=2, sort_keys=True))
    logger.info(f"Report written to {report_dir}")
    return paths
