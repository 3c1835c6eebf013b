"""Gradient-descent optimizers over :class:`~app.tensor.Tensor` parameters."""
from typing import Dict, Iterable, List

import numpy as np

from app.exceptions import ConfigError
from app.tensor import Tensor


class Optimizer:
    """Base optimizer: owns a parameter list and clears gradients after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for index, p in enumerate(self.params):
            if p.grad is not None:
                self._update(index, p)
        self.zero_grad()

    def _update(self, index: int, p: Tensor) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """p <- p - lr * grad"""

    def _update(self, index: int, p: Tensor) -> None:
        p.data -= (self.lr * p.grad).astype(p.data.dtype, copy=False)


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 5e-5,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        super().step()

    def _update(self, index: int, p: Tensor) -> None:
        g = p.grad
        m = self.m.get(index, np.zeros_like(p.data))
        v = self.v.get(index, np.zeros_like(p.data))
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.m[index], self.v[index] = m, v
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)


def build_optimizer(kind: str, params: Iterable[Tensor], lr: float, **kwargs) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr, **kwargs)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'adam' or 'sgd'")


def sgd_step(params: Iterable[Tensor], lr: float) -> List[Tensor]:
    """One plain SGD update of ``params`` followed by zeroing their grads."""
    optimizer = SGD(params, lr)
    optimizer.step()
    return optimizer.params
