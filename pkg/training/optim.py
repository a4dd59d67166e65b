from dataclasses import dataclass, field
from typing import Dict, Literal

import numpy as np

from models.config import Stage2Config
from models.errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    """Per-parameter buffers keyed like the parameters, plus a step counter"""
    kind: Literal["sgd", "adam"]
    step: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def buffer(self, slot, key, like):
        name = f"{slot}:{key}"
        if name not in self.buffers:
            self.buffers[name] = np.zeros_like(like, dtype=np.float32)
        elif self.buffers[name].shape != like.shape:
            raise ShapeError(f"optimizer buffer {name} has shape {self.buffers[name].shape}, parameter {like.shape}")
        return self.buffers[name]

    def as_dict(self):
        return {"kind": self.kind, "step": self.step, "buffers": self.buffers}

    @classmethod
    def from_dict(cls, data):
        buffers = {k: np.array(v, dtype=np.float32) for k, v in data.get("buffers", {}).items()}
        return cls(kind=data["kind"], step=int(data.get("step", 0)), buffers=buffers)


def lr_schedule(epoch, cfg: Stage2Config):
    """lr0 / decay_factor ** floor(epoch / decay_every)"""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every)


def _check_pairs(params, grads):
    for key, g in grads.items():
        if key not in params:
            raise ShapeError(f"gradient for unknown parameter {key}")
        if params[key].shape != g.shape:
            raise ShapeError(f"{key}: parameter {params[key].shape} vs gradient {g.shape}")


def sgd_momentum_step(params, grads, state: OptimizerState, lr, momentum):
    """
    v <- momentum * v + g; p <- p - lr * v, in place

    Only parameters present in grads are touched.
    """
    _check_pairs(params, grads)
    for key, g in grads.items():
        p = params[key]
        v = state.buffer("v", key, p)
        v *= np.float32(momentum)
        v += g.astype(np.float32)
        p -= np.float32(lr) * v
    state.step += 1
    return params, state


def adam_step(params, grads, state: OptimizerState, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """Adam with bias correction; the step counter is shared by all parameters"""
    _check_pairs(params, grads)
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for key, g in grads.items():
        p = params[key]
        m = state.buffer("m", key, p)
        v = state.buffer("v", key, p)
        g = g.astype(np.float32)
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * g
        v *= np.float32(beta2)
        v += np.float32(1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        p -= (np.float32(lr) * update).astype(np.float32)
    return params, state
