"""Small-parameter optimizers: central differences and Adam with backtracking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    grad = np.zeros_like(x)
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h[j]
        grad[j] = (f(x + step) - f(x - step)) / (2.0 * h[j])
    return grad


@dataclass
class DescentResult:
    x: np.ndarray
    loss: float
    initial_loss: float
    iters: int
    converged: bool
    history: list[float] = field(default_factory=list)


def adam_descent(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    loss: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lr: float,
    max_iters: int,
    tol: float,
    project: Callable[[np.ndarray], np.ndarray] = lambda x: x,
    max_halvings: int = 12,
    patience: int = 5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> DescentResult:
    """Adam-direction steps accepted only when the loss does not increase.

    A rejected step is halved up to ``max_halvings`` times; if none is
    accepted the iterate is a numerical fixed point and the run stops.
    Convergence is declared after ``patience`` consecutive accepted steps
    that each lower the loss by less than ``tol``.
    """
    x = project(np.asarray(x0, dtype=np.float64))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    f, g = loss_and_grad(x)
    f0 = f
    history = [f]
    converged = False
    quiet = 0
    it = 0
    for it in range(1, max_iters + 1):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**it)
        vhat = v / (1 - beta2**it)
        step = lr * mhat / (np.sqrt(vhat) + eps)
        accepted = False
        for _ in range(max_halvings + 1):
            cand = project(x - step)
            fc = loss(cand)
            if fc <= f:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            converged = True
            break
        delta = f - fc
        x = cand
        f, g = loss_and_grad(x)
        history.append(f)
        quiet = quiet + 1 if delta < tol else 0
        if quiet >= patience:
            converged = True
            break
    return DescentResult(x=x, loss=f, initial_loss=f0, iters=it, converged=converged, history=history)
