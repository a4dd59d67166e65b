import hashlib
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel

from engine.tensor import Tensor


class ParamSet:
    """
    Named parameter arrays of one network plus the build arguments behind them

    Arrays are updated in place by the optimizers; forward passes read them
    through ``constants()`` (nothing recorded) or ``bind(tape)`` (watched
    leaves whose gradients land on the tape).
    """

    kind = "params"

    def __init__(self, spec: BaseModel, arrays: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec
        self.arrays: Dict[str, np.ndarray] = arrays if arrays is not None else {}

    def __repr__(self):
        return f"{type(self).__name__}({self.spec!r}, tensors={len(self.arrays)})"

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.arrays.items()}

    def bind(self, tape) -> Dict[str, Tensor]:
        return {name: tape.watch(Tensor(value)) for name, value in self.arrays.items()}

    def weights(self, tape=None):
        return self.bind(tape) if tape is not None else self.constants()

    def count(self, prefix=None) -> int:
        return int(sum(v.size for k, v in self.arrays.items() if prefix is None or k.startswith(prefix)))

    def digest(self) -> str:
        """sha256 over names and raw bytes, used to audit frozen parameters"""
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()

    def copy(self):
        return type(self)(self.spec.model_copy(), {k: v.copy() for k, v in self.arrays.items()})

    def descriptor(self) -> dict:
        return {"kind": self.kind, "spec": self.spec.model_dump()}


def gaussian(rng, shape, std, mean=0.0):
    return (mean + std * rng.standard_normal(shape)).astype(np.float32)


def he_normal(rng, shape, fan_in):
    return gaussian(rng, shape, np.sqrt(2.0 / fan_in))


def zeros(shape):
    return np.zeros(shape, dtype=np.float32)
