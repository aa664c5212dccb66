from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .layers import Parameter


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        logits = logits.reshape(logits.shape[0], -1)
    b, n_classes = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {b}")
    if b and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= b
    return max(loss, 0.0), grad.astype(logits.dtype, copy=False)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """In-place SGD update.

    With ``momentum == weight_decay == 0`` this is exactly
    ``value -= lr * grad``. Otherwise weight decay is folded into the gradient
    before the momentum buffer: ``buf = momentum * buf + grad + wd * value``,
    ``value -= lr * buf``.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if momentum == 0.0 and weight_decay == 0.0:
            p.value -= lr * p.grad
            continue
        d = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.momentum_buffer *= momentum
        p.momentum_buffer += d
        p.value -= lr * p.momentum_buffer


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_norm_sq(params: Iterable[Parameter]) -> float:
    return float(sum(np.vdot(p.grad, p.grad) for p in params))


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: ``base_rate * decay_factor ** (epoch // decay_period)``."""

    base_rate: float = 0.1
    decay_factor: float = 0.2
    decay_period: int = 15

    def __post_init__(self):
        if not self.base_rate > 0:
            raise ValueError("base_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_period < 1:
            raise ValueError("decay_period must be a positive integer")

    def rate(self, epoch: int) -> float:
        return self.base_rate * self.decay_factor ** (epoch // self.decay_period)

    __call__ = rate
