"""
Training objectives.

Focal loss for the imbalanced classification stage, least-squares adversarial
losses and L1 cycle consistency for generator pretraining.
"""
import numpy as np

from engine import ops
from engine.tensor import Tensor
from models.config import LossConfig
from models.errors import ShapeError

# keeps (1 - p)^gamma differentiable when p_y rounds to 1 and gamma < 1
FOCAL_EPS = 1e-12


def inverse_frequency_alpha(labels, num_classes):
    """Per-class weights proportional to 1/frequency, normalized to mean 1"""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    if (counts == 0).any():
        # absent classes get the largest observed weight
        counts[counts == 0] = counts[counts > 0].min() if (counts > 0).any() else 1.0
    alpha = 1.0 / counts
    return (alpha / alpha.mean()).tolist()


def focal_loss(logits: Tensor, labels, cfg: LossConfig) -> Tensor:
    """
    Batch mean of -alpha[y] * (1 - p_y)^gamma * log p_y

    Args:
        logits (Tensor): [N, K]
        labels (array): N integer labels in [0, K)
        cfg (LossConfig): gamma and alpha (None -> all ones)
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"focal_loss: logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"focal_loss: labels must lie in [0, {k})")
    alpha = np.ones(k) if cfg.alpha is None else np.asarray(cfg.alpha, dtype=np.float64)
    if alpha.shape != (k,):
        raise ShapeError(f"focal_loss: alpha has {alpha.size} entries for {k} classes")

    log_p = ops.pick(ops.log_softmax(logits), labels)
    weight = Tensor(alpha[labels], dtype=logits.dtype)
    if cfg.gamma == 0:
        return ops.mean(-(weight * log_p))
    modulator = ops.power(ops.clip_min(1.0 - ops.exp(log_p), FOCAL_EPS), cfg.gamma)
    return ops.mean(-(weight * modulator * log_p))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return focal_loss(logits, labels, LossConfig(gamma=0.0))


def lsgan_losses(d_real: Tensor, d_fake: Tensor):
    """
    Least-squares adversarial losses

    Returns:
        tuple: (d_loss, g_loss) with d_loss = mean((d_real - 1)^2) + mean(d_fake^2)
        and g_loss = mean((d_fake - 1)^2)
    """
    d_loss = ops.mean(ops.power(d_real - 1.0, 2)) + ops.mean(ops.power(d_fake, 2))
    g_loss = ops.mean(ops.power(d_fake - 1.0, 2))
    return d_loss, g_loss


def generator_adversarial_loss(d_fake: Tensor) -> Tensor:
    return ops.mean(ops.power(d_fake - 1.0, 2))


def cycle_loss(x: Tensor, x_reconstructed: Tensor, lambda_cyc=10.0) -> Tensor:
    """lambda_cyc * mean absolute error"""
    if x.shape != x_reconstructed.shape:
        raise ShapeError(f"cycle_loss: shapes differ {x.shape} vs {x_reconstructed.shape}")
    return ops.mean(ops.abs(x - x_reconstructed)) * lambda_cyc
