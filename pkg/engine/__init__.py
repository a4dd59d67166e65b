from engine.tensor import (
    Tape,
    Tensor,
    backward,
    checked_mode,
    custom_op,
    default_dtype,
    get_default_dtype,
    is_checked,
    set_checked,
)
from engine import ops
from engine.gradcheck import grad_check
