import logging
from typing import Callable, Dict, Mapping

import numpy as np

from engine.tensor import Tape, Tensor, backward, default_dtype
from models.errors import NonFiniteError
from models.reports import GradCheckReport

logger = logging.getLogger("g2c-engine")

MIN_SAMPLES = 64


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Dict[str, np.ndarray],
               eps=1e-3, tol=1e-2, samples=MIN_SAMPLES, seed=0, floor=1e-6, name="gradcheck"):
    """
    Compares analytic gradients with central finite differences

    Runs in float64. For each parameter tensor a random subsample of at least
    ``samples`` coordinates (all of them for smaller tensors) is perturbed by
    +/- eps.

    Args:
        f (callable): Maps a name -> Tensor mapping to a scalar Tensor
        params (dict): name -> array, the point at which gradients are compared
        eps (float): Perturbation, in [1e-4, 1e-2]
        samples (int): Coordinates per parameter tensor, at least 64
        tol (float): Pass threshold on the maximum relative error
        floor (float): Absolute floor of the relative-error denominator

    Returns:
        GradCheckReport: max_rel_err, passed, worst parameter
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    if samples < MIN_SAMPLES:
        raise ValueError(f"samples must be at least {MIN_SAMPLES}, got {samples}")
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

        def evaluate(arrays):
            value = f({k: Tensor(v) for k, v in arrays.items()})
            return float(value.item())

        try:
            tape = Tape()
            bound = {k: tape.watch(Tensor(v)) for k, v in base.items()}
            loss = f(bound)
            if not np.isfinite(loss.data).all():
                raise NonFiniteError("loss is not finite")
            backward(tape, loss)
            analytic = {k: tape.grad(bound[k]).data for k in base}

            per_param = {}
            for key, value in base.items():
                flat = value.reshape(-1)
                count = min(flat.size, samples)
                coords = rng.choice(flat.size, size=count, replace=False)
                worst = 0.0
                for coord in coords:
                    original = flat[coord]
                    flat[coord] = original + eps
                    plus = evaluate(base)
                    flat[coord] = original - eps
                    minus = evaluate(base)
                    flat[coord] = original
                    numeric = (plus - minus) / (2 * eps)
                    exact = analytic[key].reshape(-1)[coord]
                    if not (np.isfinite(numeric) and np.isfinite(exact)):
                        raise NonFiniteError(f"non-finite gradient at {key}[{coord}]")
                    err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                    worst = max(worst, err)
                per_param[key] = float(worst)
        except (NonFiniteError, FloatingPointError) as error:
            logger.warning(f"{name}: {error}")
            return GradCheckReport(name=name, max_rel_err=float("inf"), passed=False, message=str(error))

    worst_param = max(per_param, key=per_param.get) if per_param else None
    max_err = per_param[worst_param] if worst_param else 0.0
    report = GradCheckReport(
        name=name,
        max_rel_err=max_err,
        passed=bool(max_err < tol),
        worst_param=worst_param,
        per_param=per_param,
    )
    logger.debug(f"{name}: max_rel_err={max_err:.3e} passed={report.passed}")
    return report
