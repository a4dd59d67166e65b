"""
Dense tensors with a define-by-run differentiation tape.

A Tensor is an immutable float buffer in row-major order. When it is produced
from at least one input that lives on a Tape, the operation is recorded as a
node on that tape and the result carries the node id (``tape_id``). Calling
``backward(tape, loss)`` walks the nodes in reverse and fills
``tape.gradients``.

Parameters that must stay fixed (for instance frozen generators) are simply
bound as plain constants instead of being watched, so nothing is recorded for
them.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from models.config import CHECKED_MODE
from models.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger("g2c-engine")

_settings = {
    "dtype": np.float32,
    "checked": CHECKED_MODE,
}


def get_default_dtype():
    return _settings["dtype"]


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the working precision (gradient checks run in float64)"""
    previous = _settings["dtype"]
    _settings["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _settings["dtype"] = previous


def set_checked(flag):
    _settings["checked"] = bool(flag)


def is_checked():
    return _settings["checked"]


@contextmanager
def checked_mode(flag=True):
    """Raise NonFiniteError as soon as any value becomes NaN or Inf"""
    previous = _settings["checked"]
    _settings["checked"] = bool(flag)
    try:
        yield
    finally:
        _settings["checked"] = previous


def _check_finite(arr, kind):
    if _settings["checked"] and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {kind}")


class Tensor:
    """Immutable N-dimensional float array with an optional tape link"""

    __slots__ = ("data", "tape_id", "_tape")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        if arr.dtype.kind != "f":
            raise ShapeError(f"tensors hold floats, got {arr.dtype}")
        _check_finite(arr, "constructor")
        arr.setflags(write=False)
        self.data = arr
        self.tape_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, tape=None, tape_id=None, kind="op"):
        _check_finite(arr, kind)
        obj = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        obj.data = arr
        obj.tape_id = tape_id
        obj._tape = tape
        return obj

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape(self):
        return self._tape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, tape_id={self.tape_id})"

    # Arithmetic overloads route to engine.ops
    def __add__(self, other):
        from engine import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from engine import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from engine import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from engine import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from engine import ops
        return ops.div(self, other)

    def __neg__(self):
        from engine import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from engine import ops
        return ops.power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        from engine import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from engine import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from engine import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


# backward rule: output gradient -> one gradient (or None) per input
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeNode(NamedTuple):
    kind: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]
    dtype: np.dtype


class Tape:
    """
    Append-only record of operations for one forward pass

    A tape belongs to the thread that created it.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients = {}
        self._owner = threading.get_ident()

    def __len__(self):
        return len(self.nodes)

    def _check_thread(self):
        if threading.get_ident() != self._owner:
            raise TapeError("a tape is confined to the thread that created it")

    def watch(self, tensor):
        """Registers a leaf (a trainable parameter) and returns its taped alias"""
        self._check_thread()
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        if tensor._tape is not None:
            raise TapeError("tensor is already recorded on a tape")
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, tensor.shape, tensor.dtype))
        return Tensor._wrap(tensor.data, tape=self, tape_id=node_id, kind="leaf")

    def record(self, kind, inputs, out, backward_fn):
        self._check_thread()
        ids = []
        for t in inputs:
            if t._tape is None:
                ids.append(None)
            elif t._tape is self:
                ids.append(t.tape_id)
            else:
                raise TapeError(f"{kind}: inputs come from different tapes")
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(kind, tuple(ids), backward_fn, out.shape, out.dtype))
        return Tensor._wrap(out, tape=self, tape_id=node_id, kind=kind)

    def grad(self, tensor):
        """Gradient of the last backward pass with respect to a recorded tensor"""
        if tensor._tape is not self:
            raise TapeError("tensor is not recorded on this tape")
        found = self.gradients.get(tensor.tape_id)
        if found is None:
            return Tensor._wrap(np.zeros(tensor.shape, dtype=tensor.dtype))
        return found


def record(kind, inputs, out, backward_fn):
    """
    Records an operation result

    The result is a plain constant when no input is on a tape.

    Args:
        kind (str): Operation name, kept on the node for diagnostics
        inputs (list): Input tensors in the order backward_fn returns gradients
        out (np.ndarray): Forward value
        backward_fn (callable): Maps the output gradient to per-input gradients
    """
    tape = None
    for t in inputs:
        if t._tape is not None:
            tape = t._tape
            break
    if tape is None:
        return Tensor._wrap(out, kind=kind)
    return tape.record(kind, inputs, out, backward_fn)


# Public hook for operations defined outside the engine
custom_op = record


def backward(tape, loss):
    """
    Reverse-mode sweep from a scalar loss

    Every watched leaf receives a gradient; leaves the loss does not depend on
    get exact zeros.

    Returns:
        dict: tape_id -> gradient Tensor (also stored on tape.gradients)
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    tape._check_thread()

    grads = {loss.tape_id: np.ones(loss.shape, dtype=loss.dtype)}
    for node_id in range(loss.tape_id, -1, -1):
        node = tape.nodes[node_id]
        g = grads.get(node_id)
        if g is None or node.backward is None:
            continue
        input_grads = node.backward(g)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_id is None or input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad

    tape.gradients = {}
    for node_id, node in enumerate(tape.nodes):
        g = grads.get(node_id)
        if g is None:
            if node.kind != "leaf":
                continue
            g = np.zeros(node.shape, dtype=node.dtype)
        g = np.asarray(g, dtype=node.dtype)
        if g.shape != node.shape:
            raise ShapeError(f"gradient of {node.kind} node {node_id} has shape {g.shape}, expected {node.shape}")
        tape.gradients[node_id] = Tensor._wrap(g, kind=f"grad[{node.kind}]")
    return tape.gradients
