"""Bidirectional InfoNCE over learned similarity matrices."""
import numpy as np

from app.exceptions import ContractError
from app.models import LossBreakdown
from app.tensor import Tensor, as_tensor, log_softmax


def _diagonal(x: Tensor) -> Tensor:
    idx = np.arange(x.shape[0])
    return x[idx, idx]


def _infonce(s: Tensor, name: str) -> Tensor:
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"{name}: similarity matrix must be square, got shape {s.shape}")
    rows = _diagonal(log_softmax(s, axis=1))
    cols = _diagonal(log_softmax(s, axis=0))
    return -(rows + cols).mean()


def infonce_t2i(s_t2i) -> Tensor:
    """Mean over pairs of -log row-softmax minus log column-softmax at the matched entry."""
    return _infonce(s_t2i, "infonce_t2i")


def infonce_i2t(s_i2t) -> Tensor:
    return _infonce(s_i2t, "infonce_i2t")


def total_loss(s_t2i, s_i2t) -> LossBreakdown:
    l_t2i = infonce_t2i(s_t2i)
    l_i2t = infonce_i2t(s_i2t)
    return LossBreakdown(l_t2i=l_t2i, l_i2t=l_i2t, total=l_t2i + l_i2t, batch_size=as_tensor(s_t2i).shape[0])
