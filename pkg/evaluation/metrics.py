import logging

import numpy as np
from scipy import stats

from models.errors import EvaluationError
from models.reports import MetricReport

logger = logging.getLogger("g2c-eval")

PSNR_CAP = 99.0


def confusion_matrix(labels, predictions, num_classes):
    """K x K counts, rows are true classes"""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise EvaluationError(f"{labels.size} labels vs {predictions.size} predictions")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return confusion


def per_class_recall(confusion):
    confusion = np.asarray(confusion)
    support = confusion.sum(axis=1)
    if (support == 0).any():
        empty = np.flatnonzero(support == 0).tolist()
        raise EvaluationError(f"classes {empty} have no true examples; balanced accuracy is undefined")
    return np.diag(confusion) / support


def balanced_accuracy(confusion):
    """Mean over classes of diag / row sum"""
    return float(per_class_recall(confusion).mean())


def f1_binary(confusion, positive_class=1):
    confusion = np.asarray(confusion)
    if confusion.shape != (2, 2):
        raise EvaluationError(f"f1_binary needs a 2x2 confusion, got {confusion.shape}")
    negative = 1 - positive_class
    tp = confusion[positive_class, positive_class]
    fp = confusion[negative, positive_class]
    fn = confusion[positive_class, negative]
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def metric_report(labels, predictions, class_names, positive_class=1) -> MetricReport:
    k = len(class_names)
    confusion = confusion_matrix(labels, predictions, k)
    recall = per_class_recall(confusion)
    return MetricReport(
        class_names=list(class_names),
        per_class_recall={name: float(r) for name, r in zip(class_names, recall)},
        balanced_accuracy=float(recall.mean()),
        f1=f1_binary(confusion, positive_class) if k == 2 else None,
        confusion=confusion.tolist(),
        n=int(confusion.sum()),
    )


def discordant_counts(preds_a, preds_b, labels):
    """(b, c): A right and B wrong, A wrong and B right"""
    a_right = np.asarray(preds_a) == np.asarray(labels)
    b_right = np.asarray(preds_b) == np.asarray(labels)
    return int((a_right & ~b_right).sum()), int((~a_right & b_right).sum())


def significance_test(preds_a, preds_b, labels):
    """Exact two-sided McNemar test on paired predictions"""
    if not len(preds_a) == len(preds_b) == len(labels):
        raise EvaluationError("prediction vectors must align with the same test records")
    b, c = discordant_counts(preds_a, preds_b, labels)
    if b + c == 0:
        return 1.0
    return float(min(1.0, stats.binomtest(b, b + c, 0.5, alternative="two-sided").pvalue))


def psnr(a, b, cap=PSNR_CAP):
    """10 log10(1 / MSE) for images in [0,1], capped"""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def psnr_fidelity(translate, sources, targets):
    """
    Mean per-pair PSNR of translate(sources) against the oracle targets

    Args:
        translate (callable): [N,3,H,W] -> [N,3,H,W], both in [0,1]
        sources (np.ndarray): Stain-0 images
        targets (np.ndarray): The same latents in the target stain
    """
    if len(sources) == 0 or len(sources) != len(targets):
        raise EvaluationError(f"need aligned, non-empty oracle pairs (got {len(sources)} / {len(targets)})")
    outputs = np.clip(translate(sources), 0.0, 1.0)
    return float(np.mean([psnr(o, t) for o, t in zip(outputs, targets)]))
