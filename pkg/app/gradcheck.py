"""Central finite-difference oracle for analytic gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from app.exceptions import ContractError
from app.tensor import Graph, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    per_param: Dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, index: Tuple[int, ...], h: float) -> float:
    original = param.data[index]
    with no_grad():
        param.data[index] = original + h
        plus = loss_fn().item()
        param.data[index] = original - h
        minus = loss_fn().item()
    param.data[index] = original
    return (plus - minus) / (2.0 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tuple[str, Tensor]],
    h: float = 1e-5,
    max_coords: Optional[int] = 8,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-5,
) -> GradCheckResult:
    """Compare backward() against central differences on (sampled) coordinates of each parameter.

    ``loss_fn`` must rebuild the forward pass on every call.  Parameters have to be 64-bit.
    """
    params = list(params)
    for name, p in params:
        if p.dtype != np.float64:
            raise ContractError(f"gradient check needs float64 parameters, {name} is {p.dtype}")
        p.zero_grad()
    rng = rng or np.random.default_rng(0)

    with Graph() as graph:
        loss = loss_fn()
    backward(graph, loss)

    result = GradCheckResult(max_rel_error=0.0, worst=None)
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        coords = list(np.ndindex(p.shape)) if p.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        worst_here = 0.0
        for index in coords:
            numeric = numerical_gradient(loss_fn, p, index, h)
            err = relative_error(float(analytic[index]), numeric, floor)
            result.checked += 1
            if err > worst_here:
                worst_here = err
            if err > result.max_rel_error:
                result.max_rel_error, result.worst = err, (name, tuple(int(i) for i in index))
        result.per_param[name] = worst_here
        p.zero_grad()
    logger.debug("gradcheck: %d coordinates, max rel error %.3e at %s", result.checked, result.max_rel_error, result.worst)
    return result
