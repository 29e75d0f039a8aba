"""
Optimizer, learning-rate schedule and gradient clipping over a ParamStore
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diff_engine import ParamStore
from .exceptions import NumericalError, ShapeError

logger = logging.getLogger(__name__)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """
    Rescale the gradient buffer in place to global L2 norm <= max_norm

    Returns:
        The norm before clipping
    """
    norm = float(np.sqrt(np.dot(store.grad, store.grad)))
    if not np.isfinite(norm):
        raise NumericalError(f"Gradient norm is {norm}")
    if norm > max_norm > 0:
        store.grad *= max_norm / norm
    return norm


@dataclass
class StepLR:
    """lr = initial * gamma ** (epoch // every)"""
    initial: float
    gamma: float = 0.8
    every: int = 25

    def __call__(self, epoch: int) -> float:
        return self.initial * self.gamma ** (epoch // self.every)


class AdamW:
    """
    Adam with decoupled weight decay

    Moments are kept as flat vectors aligned with the store, so the whole
    update is a handful of vectorized numpy operations.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros_like(store.data)
        self.v = np.zeros_like(store.data)
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        g = self.store.grad
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g

        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        data = self.store.data
        data *= 1.0 - self.lr * self.weight_decay
        data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if not np.all(np.isfinite(data)):
            raise NumericalError("Parameter update produced non-finite values", self.step_count)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "step_count": self.step_count}

    def load_state(self, m: np.ndarray, v: np.ndarray, step_count: int,
                   lr: Optional[float] = None) -> None:
        if m.shape != self.m.shape or v.shape != self.v.shape:
            raise ShapeError(
                f"Optimizer state has {m.shape[0]} entries, the store has {self.m.shape[0]}")
        self.m[...] = m
        self.v[...] = v
        self.step_count = int(step_count)
        if lr is not None:
            self.lr = lr
        logger.info(f"Restored optimizer state at step {self.step_count}")
